"""Training loop, determinism plumbing, checkpoint round-trip."""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..detector import Detector, total_loss
from .config import ConfigError, ExperimentConfig, config_from_mapping, config_to_flat
from .data import Sample, augment, load_coco, resize_sample, synth_dataset
from .schedule import lr_at, schedule_from_config

LOSS_COLUMNS = ("step", "epoch", "lr", "l_b", "l_r_apm", "l_cls", "l_r_det",
                "n_apm", "n_d", "total")


@dataclass
class TrainResult:
    model: Detector
    config: ExperimentConfig
    loss_rows: list[dict]
    checkpoint_path: Path | None
    steps: int

    def losses(self) -> list[float]:
        return [row["total"] for row in self.loss_rows]


def set_seeds(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def build_dataset(config: ExperimentConfig) -> list[Sample]:
    d = config.data
    size = config.model.input_size
    if d.kind == "synth":
        return synth_dataset(d.synth_images, d.synth_seed, image_size=size,
                             min_objects=d.min_objects, max_objects=d.max_objects)
    if d.kind == "coco":
        if not d.coco_annotations:
            raise ConfigError("data.coco_annotations: required for data.kind=coco")
        samples, _ = load_coco(d.coco_annotations, d.coco_images_dir,
                               input_size=size)
        return samples
    raise ConfigError(f"data.kind: unknown dataset kind {d.kind!r}")


def images_to_tensor(samples: list[Sample]) -> torch.Tensor:
    stack = np.stack([s.image for s in samples]).astype(np.float32)
    x = torch.from_numpy(stack).permute(0, 3, 1, 2)
    return (x - 0.5) / 0.5


def train_step(model: Detector, batch: list[Sample], optimizer, lr: float,
               config: ExperimentConfig) -> dict:
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    apm_out, det_out = model(images_to_tensor(batch))
    promoted = model.promote_batch(apm_out, len(batch))
    report = total_loss(
        apm_out, det_out, model.anchor_set, promoted,
        [s.boxes for s in batch], [s.labels for s in batch],
        theta=config.apm.theta, pos_thr=config.match.pos_threshold,
        neg_thr=config.match.neg_threshold,
        ohem_ratio=config.train.ohem_ratio if config.train.ohem else None,
        apm_negative_cap=config.apm.negative_cap)
    report.total().backward()
    optimizer.step()
    return report.as_floats()


def run_train(config: ExperimentConfig, out_dir: str | Path | None = None,
              progress: bool = False) -> TrainResult:
    """Train from scratch per the config; returns the model and loss curve.

    Writes ``losses.csv`` and ``checkpoint.pt`` into ``out_dir`` when given.
    """
    config.validate()
    t = config.train
    set_seeds(t.seed, t.deterministic)
    model = Detector(config.detector_config())
    model.train()
    dataset = build_dataset(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=t.warmup_start_lr,
                                momentum=t.momentum, weight_decay=t.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(dataset) / t.batch_size))
    schedule = schedule_from_config(t, steps_per_epoch)
    max_steps = t.max_steps if t.max_steps is not None else math.inf

    rows: list[dict] = []
    step = 0
    order_rng = np.random.default_rng([t.seed, 0xbeef])
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    for epoch in range(t.total_epochs):
        if step >= max_steps:
            break
        order = order_rng.permutation(len(dataset))
        for start in range(0, len(dataset), t.batch_size):
            if step >= max_steps:
                break
            idx = order[start:start + t.batch_size]
            batch = []
            for i in idx:
                s = dataset[i]
                if t.augment:
                    s = augment(s, seed=[t.seed, epoch, int(i)],
                                input_size=config.model.input_size)
                batch.append(s)
            lr = lr_at(step, schedule)
            metrics = train_step(model, batch, optimizer, lr, config)
            rows.append({"step": step, "epoch": epoch, "lr": lr, **metrics})
            if progress and step % 50 == 0:
                print(f"step {step:5d} epoch {epoch:4d} lr {lr:.2e} "
                      f"total {metrics['total']:.4f} n_d {metrics['n_d']}")
            step += 1
        if (out_path is not None and t.checkpoint_every
                and (epoch + 1) % t.checkpoint_every == 0):
            save_checkpoint(model, config, out_path / f"checkpoint_ep{epoch + 1}.pt")

    ckpt = None
    if out_path is not None:
        write_loss_csv(rows, out_path / "losses.csv")
        ckpt = out_path / "checkpoint.pt"
        save_checkpoint(model, config, ckpt)
    return TrainResult(model=model, config=config, loss_rows=rows,
                       checkpoint_path=ckpt, steps=step)


def write_loss_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOSS_COLUMNS})


def save_checkpoint(model: Detector, config: ExperimentConfig,
                    path: str | Path) -> None:
    torch.save({"format": 1,
                "config": config_to_flat(config),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> tuple[Detector, ExperimentConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=True)
    config = config_from_mapping(payload["config"])
    model = Detector(config.detector_config())
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config
