"""Step-indexed learning-rate schedule: linear warm-up, staircase decays."""

from __future__ import annotations

from dataclasses import dataclass

from .config import TrainSection


@dataclass(frozen=True)
class LrSchedule:
    warmup_start: float = 1e-6
    peak: float = 2e-3
    warmup_steps: int = 0
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1


def schedule_from_config(train: TrainSection, steps_per_epoch: int) -> LrSchedule:
    return LrSchedule(
        warmup_start=train.warmup_start_lr,
        peak=train.peak_lr,
        warmup_steps=train.warmup_epochs * steps_per_epoch,
        decay_steps=tuple(e * steps_per_epoch for e in train.decay_epochs),
        decay_factor=train.decay_factor,
    )


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Learning rate at a global step: ramps linearly from ``warmup_start`` to
    ``peak`` over the warm-up, then multiplies by ``decay_factor`` at each
    configured decay step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        frac = step / schedule.warmup_steps
        return schedule.warmup_start + (schedule.peak - schedule.warmup_start) * frac
    lr = schedule.peak
    for decay in schedule.decay_steps:
        if step >= decay:
            lr *= schedule.decay_factor
    return lr
