"""Command-line entry points: train, eval, stats, ablate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import load_coco, synth_dataset


def _parse_dataset(spec: str, input_size: int):
    """Dataset descriptors: ``synth:N:SEED`` or ``coco:ANNOTATIONS:IMAGE_DIR``."""
    parts = spec.split(":")
    if parts[0] == "synth":
        n = int(parts[1]) if len(parts) > 1 else 16
        seed = int(parts[2]) if len(parts) > 2 else 7
        return synth_dataset(n, seed, image_size=input_size)
    if parts[0] == "coco":
        if len(parts) < 3:
            raise SystemExit("coco dataset spec needs coco:ANNOTATIONS:IMAGE_DIR")
        samples, _ = load_coco(parts[1], parts[2], input_size=input_size)
        return samples
    raise SystemExit(f"unknown dataset spec {spec!r}")


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.train.seed = args.seed
    if args.deterministic:
        config.train.deterministic = True
    from .train import run_train

    result = run_train(config, out_dir=args.out, progress=True)
    print(f"trained {result.steps} steps; final loss "
          f"{result.loss_rows[-1]['total']:.4f}" if result.loss_rows
          else "no steps ran")
    if result.checkpoint_path is not None:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate_map
    from .train import load_checkpoint

    model, config = load_checkpoint(args.checkpoint)
    dataset = _parse_dataset(args.dataset, config.model.input_size)
    detections = []
    records = []
    for sample in dataset:
        det = model.infer(sample.image,
                          max_detections=config.infer.max_detections,
                          confidence_floor=config.infer.confidence_floor,
                          nms_iou=config.infer.nms_iou)
        detections.append(det)
        records.extend(det.to_records(sample.image_id))
    report = evaluate_map(detections, dataset,
                          num_classes=config.model.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "map.csv")
    with open(out / "detections.json", "w") as fh:
        json.dump(records, fh, indent=1)
    for name, value in report.rows():
        print(f"{name:>16}: {value:.4f}")
    return 0


def _cmd_stats(args) -> int:
    from .stats import census_over_dataset, plot_census
    from .train import load_checkpoint

    model, config = load_checkpoint(args.checkpoint)
    dataset = _parse_dataset(args.dataset, config.model.input_size)
    report = census_over_dataset(model, dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "census.csv")
    plot_census(report, out)
    for row in report.rows():
        print(row)
    return 0


#: (row label, config overrides) — scoring/adjustment toggles without
#: alignment, then every offset strategy on top of the full promotion.
ABLATION_GRID: tuple[tuple[str, dict], ...] = (
    ("baseline", {"apm.enabled": "false", "fam": "none"}),
    ("apm_c", {"apm.enabled": "true", "apm.scoring": "true",
               "apm.adjustment": "false", "fam": "none"}),
    ("apm_r", {"apm.enabled": "true", "apm.scoring": "false",
               "apm.adjustment": "true", "fam": "none"}),
    ("apm_cr", {"apm.enabled": "true", "apm.scoring": "true",
                "apm.adjustment": "true", "fam": "none"}),
    ("apm_cr+implicit", {"fam": "implicit"}),
    ("apm_cr+explicit_loc", {"fam": "explicit_loc"}),
    ("apm_cr+explicit_shape", {"fam": "explicit_shape"}),
    ("apm_cr+explicit_concat", {"fam": "explicit_concat"}),
    ("apm_cr+disentangled", {"fam": "disentangled"}),
)


def apply_ablation(config, overrides: dict):
    """Return a copy of ``config`` with one ablation cell applied."""
    cfg = dataclasses.replace(
        config,
        **{f.name: dataclasses.replace(getattr(config, f.name))
           for f in dataclasses.fields(config)})
    for key, value in overrides.items():
        if key == "fam":
            for level in range(1, 5):
                setattr(cfg.fam, f"level{level}_mode", value)
        elif key == "apm.enabled":
            cfg.apm.enabled = value == "true"
        elif key == "apm.scoring":
            cfg.apm.scoring = value == "true"
        elif key == "apm.adjustment":
            cfg.apm.adjustment = value == "true"
    return cfg.validate()


def _cmd_ablate(args) -> int:
    from .evaluate import evaluate_map
    from .train import build_dataset, run_train

    base = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, overrides in ABLATION_GRID:
        config = apply_ablation(base, overrides)
        result = run_train(config, out_dir=None)
        dataset = build_dataset(config)
        detections = [result.model.infer(s.image) for s in dataset]
        report = evaluate_map(detections, dataset,
                              num_classes=config.model.num_classes)
        rows.append({"variant": label, "AP": report.ap, "AP50": report.ap50,
                     "AP75": report.ap75})
        print(f"{label:>24}: AP {report.ap:.4f}  AP50 {report.ap50:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "AP", "AP50", "AP75"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promodet",
        description="Anchor-promoting single-shot detector harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="anchor census before/after promotion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("ablate", help="sweep the component toggle grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
