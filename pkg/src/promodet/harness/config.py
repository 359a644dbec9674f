"""Experiment configuration: dataclasses plus a flat dotted-key file format.

Config files are plain text, one ``section.key = value`` per line; ``#``
starts a comment. Values are coerced to the target field's type; unknown or
malformed keys raise :class:`ConfigError` naming the offending path. Every
externally fixed constant (thresholds, schedule values, suppression
parameters) appears as a named key with its default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..detector import DetectorConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the field path."""


@dataclass
class ModelSection:
    input_size: int = 384
    num_classes: int = 3
    encoder_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    decoder_channels: int = 256


@dataclass
class ApmSection:
    enabled: bool = True
    scoring: bool = True
    adjustment: bool = True
    theta: float = 0.01
    score_prior: float = 0.01
    negative_cap: int | None = None


@dataclass
class FamSection:
    level1_mode: str = "disentangled"
    level2_mode: str = "disentangled"
    level3_mode: str = "disentangled"
    level4_mode: str = "disentangled"
    level5_mode: str = "none"
    level6_mode: str = "none"
    detach_adjustment: bool = False

    def modes(self) -> tuple[str, ...]:
        return (self.level1_mode, self.level2_mode, self.level3_mode,
                self.level4_mode, self.level5_mode, self.level6_mode)


@dataclass
class MatchSection:
    pos_threshold: float = 0.5
    neg_threshold: float = 0.3


@dataclass
class TrainSection:
    batch_size: int = 8          # desk-scale default; the reference setup used 32
    total_epochs: int = 160
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (100, 140)
    decay_factor: float = 0.1
    warmup_start_lr: float = 1e-6
    peak_lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    deterministic: bool = False
    augment: bool = True
    ohem: bool = False
    ohem_ratio: float = 3.0
    max_steps: int | None = None
    checkpoint_every: int | None = None


@dataclass
class DataSection:
    kind: str = "synth"
    synth_images: int = 200
    synth_seed: int = 7
    min_objects: int = 1
    max_objects: int = 5
    coco_annotations: str = ""
    coco_images_dir: str = ""


@dataclass
class InferSection:
    confidence_floor: float = 0.01
    nms_iou: float = 0.3
    nms_sigma: float = 0.5       # recorded for fidelity; the linear kernel ignores it
    max_detections: int = 300


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    apm: ApmSection = field(default_factory=ApmSection)
    fam: FamSection = field(default_factory=FamSection)
    match: MatchSection = field(default_factory=MatchSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    infer: InferSection = field(default_factory=InferSection)

    def validate(self) -> "ExperimentConfig":
        t = self.train
        decays = tuple(t.decay_epochs)
        if len(decays) >= 1 and not t.warmup_epochs < decays[0]:
            raise ConfigError("train.warmup_epochs must precede the first decay")
        if any(decays[i] >= decays[i + 1] for i in range(len(decays) - 1)):
            raise ConfigError("train.decay_epochs must be strictly increasing")
        if decays and decays[-1] > t.total_epochs:
            raise ConfigError("train.decay_epochs must not exceed train.total_epochs")
        if self.data.kind not in ("synth", "coco"):
            raise ConfigError(f"data.kind: unknown dataset kind {self.data.kind!r}")
        self.detector_config()  # surfaces model/apm/fam inconsistencies
        return self

    def detector_config(self) -> DetectorConfig:
        try:
            return DetectorConfig(
                input_size=self.model.input_size,
                num_classes=self.model.num_classes,
                encoder_channels=tuple(self.model.encoder_channels),
                decoder_channels=self.model.decoder_channels,
                apm_enabled=self.apm.enabled,
                apm_scoring=self.apm.scoring,
                apm_adjustment=self.apm.adjustment,
                theta=self.apm.theta,
                fam_modes=self.fam.modes(),
                fam_detach_adjustment=self.fam.detach_adjustment,
                score_prior=self.apm.score_prior,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {"model": ModelSection, "apm": ApmSection, "fam": FamSection,
             "match": MatchSection, "train": TrainSection, "data": DataSection,
             "infer": InferSection}


def _coerce(path: str, text: str, target_type) -> object:
    text = text.strip()
    origin = typing.get_origin(target_type)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _coerce(path, text, args[0])
    if target_type is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{path}: expected a boolean, got {text!r}")
    if target_type is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: expected an integer, got {text!r}") from exc
    if target_type is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{path}: expected a number, got {text!r}") from exc
    if origin is tuple:
        elem = typing.get_args(target_type)[0]
        if not text:
            return ()
        return tuple(_coerce(path, part, elem) for part in text.split(","))
    if target_type is str:
        return text
    raise ConfigError(f"{path}: unsupported field type {target_type}")


def parse_flat(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a flat string dict."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_flat(flat: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    hints = {name: typing.get_type_hints(cls) for name, cls in _SECTIONS.items()}
    for path, value in flat.items():
        parts = path.split(".")
        section = parts[0]
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section {section!r}")
        # fam.levelN.mode maps onto the levelN_mode field.
        if section == "fam" and len(parts) == 3 and parts[2] == "mode":
            attr = f"{parts[1]}_mode"
        elif len(parts) == 2:
            attr = parts[1]
        else:
            raise ConfigError(f"{path}: unknown key")
        target = getattr(cfg, section)
        if attr not in hints[section]:
            raise ConfigError(f"{path}: unknown key")
        setattr(target, attr, _coerce(path, value, hints[section][attr]))
    return cfg.validate()


def config_to_flat(cfg: ExperimentConfig) -> dict[str, object]:
    """Flatten a config back to dotted keys (primitive values)."""
    flat: dict[str, object] = {}
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            key = (f"fam.{f.name[:-5]}.mode" if section == "fam"
                   and f.name.endswith("_mode") else f"{section}.{f.name}")
            flat[key] = getattr(obj, f.name)
    return flat


def format_flat(flat: dict[str, object]) -> str:
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return config_from_flat(parse_flat(path.read_text()))


def config_from_mapping(flat: dict[str, object]) -> ExperimentConfig:
    """Rebuild a config from an already-typed flat mapping (checkpoints)."""
    return config_from_flat({k: ("none" if v is None else
                                 ",".join(str(x) for x in v)
                                 if isinstance(v, (tuple, list)) else str(v))
                             for k, v in flat.items()})
