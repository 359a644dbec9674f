"""Box arithmetic: IoU, center/corner conversion, delta coding, soft-NMS.

Boxes are axis-aligned rectangles in continuous image-pixel coordinates,
corner form (x1, y1, x2, y2) with half-open semantics: area is
(x2 - x1) * (y2 - y1), no +1 correction. A box is valid iff x2 > x1 and
y2 > y1. Array functions take float ndarrays of shape (N, 4) and are the
workhorses; the scalar ``Box`` type exists for readability in tests and
single-box call sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Invalid box geometry or non-finite delta input."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form, with an optional confidence score."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float, float, float]:
        """(cx, cy, w, h) form."""
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2,
                self.width, self.height)

    def is_valid(self) -> bool:
        return self.x2 > self.x1 and self.y2 > self.y1

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float,
                    score: float | None = None) -> "Box":
        return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, score)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class BoxDeltas:
    """Center-offset / log-size box transform.

    dx, dy are center shifts normalized by the reference box width/height;
    dw, dh are log size ratios. No variance rescaling constants.
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def _require_valid(box: Box, name: str) -> None:
    if not box.is_valid():
        raise GeometryError(f"{name} is degenerate: {box}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes. 0 when disjoint."""
    _require_valid(a, "a")
    _require_valid(b, "b")
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays.

    Returns an (N, M) float64 matrix. Degenerate rows in either input
    raise GeometryError.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    others = np.asarray(others, dtype=np.float64).reshape(-1, 4)
    for arr, name in ((boxes, "boxes"), (others, "others")):
        if arr.size and ((arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1])).any():
            raise GeometryError(f"degenerate box in {name}")
    if boxes.shape[0] == 0 or others.shape[0] == 0:
        return np.zeros((boxes.shape[0], others.shape[0]))
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    ix = (np.minimum(boxes[:, None, 2], others[None, :, 2])
          - np.maximum(boxes[:, None, 0], others[None, :, 0]))
    iy = (np.minimum(boxes[:, None, 3], others[None, :, 3])
          - np.maximum(boxes[:, None, 1], others[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode(anchor: Box, target: Box) -> BoxDeltas:
    """Deltas that move ``anchor`` onto ``target`` (center/log-size form)."""
    _require_valid(anchor, "anchor")
    if target.width <= 0 or target.height <= 0:
        raise GeometryError(f"target has non-positive size: {target}")
    ax, ay, aw, ah = anchor.center
    gx, gy, gw, gh = target.center
    return BoxDeltas((gx - ax) / aw, (gy - ay) / ah,
                     math.log(gw / aw), math.log(gh / ah))


# Anything past single-precision range is an exploded decode, not a box.
_OVERFLOW_LIMIT = float(np.finfo(np.float32).max)


def decode(anchor: Box, deltas: BoxDeltas) -> Box:
    """Inverse of :func:`encode`.

    Raises on non-finite deltas and on results overflowing single-precision
    range (an exp of a runaway log-size delta).
    """
    _require_valid(anchor, "anchor")
    ax, ay, aw, ah = anchor.center
    try:
        w = aw * math.exp(deltas.dw)
        h = ah * math.exp(deltas.dh)
    except OverflowError as exc:
        raise GeometryError(f"deltas overflow: {deltas}") from exc
    cx = ax + deltas.dx * aw
    cy = ay + deltas.dy * ah
    if not all(math.isfinite(v) and abs(v) <= _OVERFLOW_LIMIT
               for v in (cx, cy, w, h)):
        raise GeometryError(f"non-finite decode result from {deltas}")
    return Box.from_center(cx, cy, w, h)


def encode_boxes(anchors_cwh: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized encode. ``anchors_cwh`` is (N, 4) center form, ``targets`` (N, 4) corner form."""
    anchors_cwh = np.asarray(anchors_cwh, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    gw = targets[:, 2] - targets[:, 0]
    gh = targets[:, 3] - targets[:, 1]
    if (gw <= 0).any() or (gh <= 0).any():
        raise GeometryError("target with non-positive size")
    gx = (targets[:, 0] + targets[:, 2]) / 2
    gy = (targets[:, 1] + targets[:, 3]) / 2
    ax, ay, aw, ah = anchors_cwh.T
    return np.stack([(gx - ax) / aw, (gy - ay) / ah,
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors_cwh: np.ndarray, deltas: np.ndarray,
                 min_size: float | None = None) -> tuple[np.ndarray, int]:
    """Vectorized decode from center-form anchors; returns (center-form boxes, clamp count).

    With ``min_size`` set, decoded widths/heights below it are clamped up and
    counted instead of raising; non-finite deltas always raise.
    """
    anchors_cwh = np.asarray(anchors_cwh, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.isfinite(deltas).all():
        raise GeometryError("non-finite deltas")
    ax, ay, aw, ah = anchors_cwh.T
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    with np.errstate(over="raise"):
        try:
            w = aw * np.exp(deltas[:, 2])
            h = ah * np.exp(deltas[:, 3])
        except FloatingPointError as exc:
            raise GeometryError("deltas overflow in exp") from exc
    for arr in (cx, cy, w, h):
        if (np.abs(arr) > _OVERFLOW_LIMIT).any():
            raise GeometryError("decode result overflows single-precision range")
    clamped = 0
    if min_size is not None:
        clamped = int((w < min_size).sum() + (h < min_size).sum())
        w = np.maximum(w, min_size)
        h = np.maximum(h, min_size)
    return np.stack([cx, cy, w, h], axis=1), clamped


def center_to_corner(cwh: np.ndarray) -> np.ndarray:
    cwh = np.asarray(cwh, dtype=np.float64)
    half_w = cwh[:, 2] / 2
    half_h = cwh[:, 3] / 2
    return np.stack([cwh[:, 0] - half_w, cwh[:, 1] - half_h,
                     cwh[:, 0] + half_w, cwh[:, 1] + half_h], axis=1)


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([(boxes[:, 0] + boxes[:, 2]) / 2,
                     (boxes[:, 1] + boxes[:, 3]) / 2,
                     boxes[:, 2] - boxes[:, 0],
                     boxes[:, 3] - boxes[:, 1]], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip corner-form boxes to [0, width] x [0, height]."""
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, height)
    return boxes


def soft_nms_linear(boxes: np.ndarray, scores: np.ndarray,
                    iou_threshold: float = 0.3,
                    score_floor: float = 0.01) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy soft-NMS with the linear rescoring kernel.

    Repeatedly selects the highest-score surviving box; every remaining box
    overlapping it above ``iou_threshold`` has its score scaled by
    (1 - IoU), and survivors whose score drops below ``score_floor`` are
    discarded. Box coordinates are never modified; scores never increase.

    Returns (boxes, scores, original indices) of the kept boxes, sorted by
    final score descending. Empty input yields empty output.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1).copy()
    if boxes.shape[0] != scores.shape[0]:
        raise GeometryError("boxes/scores length mismatch")
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise GeometryError("scores must lie in [0, 1]")
    n = boxes.shape[0]
    if n == 0:
        return boxes, scores, np.zeros(0, dtype=np.int64)

    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    kept_scores: list[float] = []
    while alive.any():
        cand = np.where(alive)[0]
        sel = cand[np.argmax(scores[cand])]
        kept.append(sel)
        kept_scores.append(scores[sel])
        alive[sel] = False
        rest = np.where(alive)[0]
        if rest.size == 0:
            break
        overlaps = iou_matrix(boxes[sel:sel + 1], boxes[rest])[0]
        decay = overlaps > iou_threshold
        scores[rest[decay]] *= 1.0 - overlaps[decay]
        alive[rest[scores[rest] < score_floor]] = False

    order = np.argsort(-np.asarray(kept_scores), kind="stable")
    idx = np.asarray(kept, dtype=np.int64)[order]
    return boxes[idx], np.asarray(kept_scores)[order], idx
