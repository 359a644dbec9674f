"""Multi-level anchor grids, bidirectional matching, gating, imbalance census.

Anchors live on six detection levels. The grid for a level of stride s on an
input of side L has (L/s)^2 cells with anchor centers at ((i+0.5)s, (j+0.5)s);
each cell carries A anchors (one per aspect-ratio entry, the second ratio-1
entry using the larger ``second_scale``). Anchors are generated unclipped and
enumerated level-major, then row-major over cells, then ratio order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, center_to_corner, iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

WIDE_RATIOS = (1.0, 1.0, 2.0, 3.0, 1 / 2, 1 / 3)   # levels 1-4
NARROW_RATIOS = (1.0, 1.0, 2.0, 1 / 2)             # levels 5-6

IOU_BIN_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class LevelConfig:
    """Anchor layout of one detection level."""

    stride: int
    base_scale: float
    second_scale: float
    aspect_ratios: tuple[float, ...]
    fam_enabled: bool = False

    @property
    def anchors_per_location(self) -> int:
        return len(self.aspect_ratios)


@dataclass
class AnchorSet:
    """All anchors of one input-size configuration.

    ``centers`` is the canonical (N, 4) center-form array (cx, cy, w, h);
    ``boxes`` the derived corner form. ``level_of`` maps each anchor to its
    level index, and ``level_slices`` give the contiguous per-level ranges.
    """

    input_size: int
    levels: tuple[LevelConfig, ...]
    centers: np.ndarray
    boxes: np.ndarray
    level_of: np.ndarray
    level_slices: tuple[slice, ...]
    grid_sizes: tuple[int, ...]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def anchors_per_location(self) -> tuple[int, ...]:
        return tuple(lv.anchors_per_location for lv in self.levels)

    def level_counts(self) -> tuple[int, ...]:
        return tuple(s.stop - s.start for s in self.level_slices)


@dataclass
class MatchResult:
    """Per-anchor matching outcome: label, matched GT index (-1 if none), max IoU."""

    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray

    def counts(self) -> tuple[int, int, int]:
        return (int((self.labels == POSITIVE).sum()),
                int((self.labels == NEGATIVE).sum()),
                int((self.labels == IGNORE).sum()))


@dataclass
class ImbalanceStats:
    """Foreground/background census of one matching pass."""

    positive_count: int
    negative_count: int
    ignored_count: int
    iou_histogram: tuple[int, ...] = field(default=(0, 0, 0, 0, 0))

    def ratio(self) -> float:
        """Positives per negative; inf when there are no negatives."""
        if self.negative_count == 0:
            return math.inf
        return self.positive_count / self.negative_count


def downsampled_grid(d5_size: int) -> tuple[int, int]:
    """(grid size, conv stride) of the extra level derived from the stride-128 map.

    A 3x3 convolution with padding 1 and the returned stride produces the
    grid: stride 3 collapses an odd 3-cell map to 1, stride 2 halves even
    maps (4 -> 2) and keeps degenerate 1-cell maps at 1.
    """
    stride = 3 if (d5_size % 2 == 1 and d5_size > 1) else 2
    return (d5_size + 2 - 3) // stride + 1, stride


def paper_level_configs(input_size: int) -> tuple[LevelConfig, ...]:
    """The six-level layout: strides {8,...,128} plus the derived extra level.

    Scales follow the SSD family convention: base scale 4x stride, and the
    duplicated ratio-1 anchor at the geometric mean of consecutive base
    scales (extrapolated by sqrt(2) at the last level).
    """
    strides = [8, 16, 32, 64, 128]
    for s in strides:
        if input_size % s != 0:
            raise ValueError(f"input size {input_size} not divisible by stride {s}")
    d6_grid, _ = downsampled_grid(input_size // 128)
    strides.append(input_size // d6_grid)
    base = [4.0 * s for s in strides]
    second = [math.sqrt(base[i] * base[i + 1]) for i in range(5)]
    second.append(base[5] * math.sqrt(2.0))
    levels = []
    for i in range(6):
        ratios = WIDE_RATIOS if i < 4 else NARROW_RATIOS
        levels.append(LevelConfig(stride=strides[i], base_scale=base[i],
                                  second_scale=second[i], aspect_ratios=ratios,
                                  fam_enabled=i < 4))
    return tuple(levels)


def generate_anchors(input_size: int, levels: tuple[LevelConfig, ...] | list[LevelConfig]) -> AnchorSet:
    """Tile the anchor grid for every level. Deterministic and unclipped."""
    if not levels:
        raise ValueError("empty level list")
    centers_all = []
    level_of = []
    slices = []
    grid_sizes = []
    start = 0
    for li, lv in enumerate(levels):
        n = int(round(input_size / lv.stride))
        if n < 1:
            raise ValueError(f"stride {lv.stride} exceeds input size {input_size}")
        grid_sizes.append(n)
        coords = (np.arange(n, dtype=np.float64) + 0.5) * lv.stride
        cy, cx = np.meshgrid(coords, coords, indexing="ij")
        shapes = []
        for k, r in enumerate(lv.aspect_ratios):
            scale = lv.second_scale if _is_second_unit_ratio(lv.aspect_ratios, k) else lv.base_scale
            shapes.append((scale * math.sqrt(r), scale / math.sqrt(r)))
        a = len(shapes)
        cwh = np.empty((n, n, a, 4), dtype=np.float64)
        cwh[..., 0] = cx[:, :, None]
        cwh[..., 1] = cy[:, :, None]
        for k, (w, h) in enumerate(shapes):
            cwh[:, :, k, 2] = w
            cwh[:, :, k, 3] = h
        flat = cwh.reshape(-1, 4)
        centers_all.append(flat)
        level_of.append(np.full(flat.shape[0], li, dtype=np.int64))
        slices.append(slice(start, start + flat.shape[0]))
        start += flat.shape[0]
    centers = np.concatenate(centers_all, axis=0)
    return AnchorSet(input_size=input_size, levels=tuple(levels),
                     centers=centers, boxes=center_to_corner(centers),
                     level_of=np.concatenate(level_of),
                     level_slices=tuple(slices), grid_sizes=tuple(grid_sizes))


def _is_second_unit_ratio(ratios: tuple[float, ...], k: int) -> bool:
    # The duplicated ratio-1 anchor is the second occurrence of ratio 1.
    return ratios[k] == 1.0 and 1.0 in ratios[:k]


def match(anchor_boxes: np.ndarray, gt_boxes: np.ndarray,
          pos_thr: float = 0.5, neg_thr: float = 0.3) -> MatchResult:
    """Bidirectional anchor/ground-truth assignment.

    Step 1: every GT claims its highest-IoU free anchor (ties to the lowest
    anchor index) as POSITIVE; claims are exclusive and never overridden.
    Step 2: each unclaimed anchor is POSITIVE toward its argmax GT when its
    max IoU >= ``pos_thr``, NEGATIVE below ``neg_thr``, IGNORE in between.
    With no GTs everything is NEGATIVE.
    """
    if not pos_thr > neg_thr:
        raise ValueError("pos_thr must exceed neg_thr")
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchor_boxes.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if gt_boxes.shape[0] == 0:
        return MatchResult(labels, matched, np.zeros(n))
    if ((gt_boxes[:, 2] <= gt_boxes[:, 0]) | (gt_boxes[:, 3] <= gt_boxes[:, 1])).any():
        raise GeometryError("invalid ground-truth box")

    overlaps = iou_matrix(anchor_boxes, gt_boxes)
    max_iou = overlaps.max(axis=1)
    argmax_gt = overlaps.argmax(axis=1)

    claimed = np.zeros(n, dtype=bool)
    for g in range(gt_boxes.shape[0]):
        col = overlaps[:, g].copy()
        col[claimed] = -np.inf
        if not np.isfinite(col).any():
            continue  # more GTs than anchors
        best = int(np.argmax(col))
        labels[best] = POSITIVE
        matched[best] = g
        claimed[best] = True

    free = ~claimed
    pos = free & (max_iou >= pos_thr)
    labels[pos] = POSITIVE
    matched[pos] = argmax_gt[pos]
    labels[free & (max_iou < neg_thr) & ~pos] = NEGATIVE
    labels[free & (max_iou >= neg_thr) & (max_iou < pos_thr)] = IGNORE
    return MatchResult(labels, matched, max_iou)


def gate_negatives(result: MatchResult, scores: np.ndarray,
                   theta: float = 0.01) -> MatchResult:
    """Turn easy negatives into IGNORE: NEGATIVE anchors whose promotion score
    falls below ``theta`` leave training; positives and hard negatives stay."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != result.labels.shape[0]:
        raise ValueError("scores not aligned with anchors")
    labels = result.labels.copy()
    labels[(labels == NEGATIVE) & (scores < theta)] = IGNORE
    return MatchResult(labels, result.matched_gt.copy(), result.max_iou.copy())


def stats_of(result: MatchResult) -> ImbalanceStats:
    """Census of one matching pass, with positives binned by max IoU."""
    pos, neg, ign = result.counts()
    hist = [0] * (len(IOU_BIN_EDGES) - 1)
    for v in result.max_iou[result.labels == POSITIVE]:
        if v < IOU_BIN_EDGES[0]:
            continue  # best-IoU-forced positive below the first bin
        hist[min(int((v - IOU_BIN_EDGES[0]) / 0.1), len(hist) - 1)] += 1
    return ImbalanceStats(pos, neg, ign, tuple(hist))


def census(anchors_before: np.ndarray, anchors_after: np.ndarray,
           gt_boxes: np.ndarray, match_fn=match) -> tuple[ImbalanceStats, ImbalanceStats]:
    """Imbalance statistics before and after promotion under identical rules."""
    anchors_before = np.asarray(anchors_before, dtype=np.float64).reshape(-1, 4)
    anchors_after = np.asarray(anchors_after, dtype=np.float64).reshape(-1, 4)
    if anchors_before.shape != anchors_after.shape:
        raise ValueError("before/after anchor arrays are misaligned")
    return (stats_of(match_fn(anchors_before, gt_boxes)),
            stats_of(match_fn(anchors_after, gt_boxes)))
