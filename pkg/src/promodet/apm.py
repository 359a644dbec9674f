"""Anchor promotion: per-level scoring and coarse adjustment heads.

Each level carries two parallel 3x3 convolution heads on the decoder
feature: one scores every anchor's probability of being positive (A
channels through a sigmoid), one regresses coarse (dx, dy, dw, dh) deltas
(4A channels, anchor-major). Either branch can be disabled, in which case
scores are the constant 1 (gating becomes a no-op) or deltas are constant
0 (promotion is the identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .anchors import AnchorSet
from .geometry import center_to_corner, decode_boxes

MIN_PROMOTED_SIZE = 1.0


@dataclass
class ApmOutput:
    """Per-level promotion maps. ``score_logits[k]`` is (B, A, H, W) or None
    when scoring is disabled; ``deltas[k]`` is (B, 4A, H, W) or None when
    adjustment is disabled."""

    score_logits: list[torch.Tensor | None]
    deltas: list[torch.Tensor | None]
    anchors_per_location: tuple[int, ...]
    grid_sizes: tuple[int, ...]

    @property
    def batch_size(self) -> int:
        for t in list(self.score_logits) + list(self.deltas):
            if t is not None:
                return t.shape[0]
        raise ValueError("empty promotion output")

    def scores(self, level: int) -> torch.Tensor:
        """(B, A, H, W) positivity probabilities; ones when scoring is off."""
        logits = self.score_logits[level]
        if logits is not None:
            return torch.sigmoid(logits)
        a = self.anchors_per_location[level]
        n = self.grid_sizes[level]
        ref = self.deltas[level]
        return torch.ones(ref.shape[0], a, n, n, dtype=ref.dtype, device=ref.device)

    def delta_map(self, level: int) -> torch.Tensor:
        """(B, 4A, H, W) adjustment map; zeros when adjustment is off."""
        d = self.deltas[level]
        if d is not None:
            return d
        a = self.anchors_per_location[level]
        n = self.grid_sizes[level]
        ref = self.score_logits[level]
        return torch.zeros(ref.shape[0], 4 * a, n, n, dtype=ref.dtype,
                           device=ref.device)

    def flat_scores(self) -> torch.Tensor:
        """(B, N) scores in anchor enumeration order across all levels."""
        parts = []
        for k in range(len(self.anchors_per_location)):
            s = self.scores(k)
            b, a, h, w = s.shape
            parts.append(s.permute(0, 2, 3, 1).reshape(b, h * w * a))
        return torch.cat(parts, dim=1)

    def flat_score_logits(self) -> torch.Tensor | None:
        """(B, N) logits, or None when the scoring branch is disabled."""
        if any(t is None for t in self.score_logits):
            return None
        parts = []
        for t in self.score_logits:
            b, a, h, w = t.shape
            parts.append(t.permute(0, 2, 3, 1).reshape(b, h * w * a))
        return torch.cat(parts, dim=1)

    def flat_deltas(self) -> torch.Tensor:
        """(B, N, 4) adjustment deltas in anchor enumeration order."""
        parts = []
        for k in range(len(self.anchors_per_location)):
            d = self.delta_map(k)
            b, ca, h, w = d.shape
            a = ca // 4
            parts.append(d.view(b, a, 4, h, w).permute(0, 3, 4, 1, 2)
                         .reshape(b, h * w * a, 4))
        return torch.cat(parts, dim=1)


@dataclass
class PromotedAnchors:
    """Anchors after coarse adjustment: same count and order as the input set."""

    boxes: np.ndarray       # (N, 4) corner form
    centers: np.ndarray     # (N, 4) center form
    scores: np.ndarray      # (N,) promotion scores
    size_clamp_count: int = 0


class _LevelBranches(nn.Module):
    """Score/delta conv pair of one level (either may be absent)."""

    def __init__(self, feature_channels: int, anchors: int, scoring: bool,
                 adjustment: bool, score_prior: float):
        super().__init__()
        if scoring:
            self.score = nn.Conv2d(feature_channels, anchors, 3, padding=1)
            # Permissive early gating: initial scores sit at the gate threshold.
            nn.init.normal_(self.score.weight, std=0.01)
            nn.init.constant_(self.score.bias,
                              math.log(score_prior / (1 - score_prior)))
        if adjustment:
            self.delta = nn.Conv2d(feature_channels, 4 * anchors, 3, padding=1)
            nn.init.zeros_(self.delta.weight)
            nn.init.zeros_(self.delta.bias)


class PromotionHead(nn.Module):
    """Scoring and adjustment convolutions over all pyramid levels."""

    def __init__(self, feature_channels: int, anchors_per_location: tuple[int, ...],
                 scoring: bool = True, adjustment: bool = True,
                 score_prior: float = 0.01):
        super().__init__()
        if not scoring and not adjustment:
            raise ValueError("promotion enabled but both branches are off")
        self.scoring = scoring
        self.adjustment = adjustment
        self.anchors_per_location = tuple(anchors_per_location)
        for k, a in enumerate(self.anchors_per_location, start=1):
            setattr(self, f"level{k}",
                    _LevelBranches(feature_channels, a, scoring, adjustment,
                                   score_prior))

    def forward(self, pyramid: list[torch.Tensor]) -> ApmOutput:
        if len(pyramid) != len(self.anchors_per_location):
            raise ValueError("pyramid levels do not match anchor layout")
        logits = []
        deltas = []
        for k, feat in enumerate(pyramid, start=1):
            branches = getattr(self, f"level{k}")
            logits.append(branches.score(feat) if self.scoring else None)
            deltas.append(branches.delta(feat) if self.adjustment else None)
        return ApmOutput(logits, deltas, self.anchors_per_location,
                         tuple(f.shape[-1] for f in pyramid))


def promote_arrays(anchor_set: AnchorSet, deltas: np.ndarray,
                   scores: np.ndarray) -> PromotedAnchors:
    """Decode one image's flat (N, 4) deltas against the anchor grid."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(anchor_set), 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(len(anchor_set))
    centers, clamped = decode_boxes(anchor_set.centers, deltas,
                                    min_size=MIN_PROMOTED_SIZE)
    return PromotedAnchors(boxes=center_to_corner(centers), centers=centers,
                           scores=scores, size_clamp_count=clamped)


def promote(anchor_set: AnchorSet, apm_out: ApmOutput) -> PromotedAnchors:
    """Promote every anchor of a single-image forward pass.

    One output box per input anchor, decoded from the adjustment deltas; no
    clipping or filtering. Decoded sizes collapsing below one pixel are
    clamped and counted.
    """
    if apm_out.batch_size != 1:
        raise ValueError("promote expects a single-image forward pass")
    deltas = apm_out.flat_deltas().detach().cpu().numpy()[0]
    scores = apm_out.flat_scores().detach().cpu().numpy()[0]
    return promote_arrays(anchor_set, deltas, scores)
