"""COCO-style mean average precision with 101-point interpolation.

AP is computed per class and IoU threshold by greedy score-ordered matching
(each detection takes the highest-IoU unmatched ground truth at or above
the threshold), then averaging the interpolated precision over 101 recall
points. Size-bucketed variants ignore ground truths outside the bucket and
discard detections that either match an ignored ground truth or fall
outside the bucket unmatched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..detector import Detections
from ..geometry import iou_matrix
from .data import Sample

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AREA_BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MapReport:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    per_class_ap50: dict[int, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        rows = [("AP", self.ap), ("AP50", self.ap50), ("AP75", self.ap75),
                ("APs", self.ap_small), ("APm", self.ap_medium),
                ("APl", self.ap_large)]
        rows += [(f"AP50_class{c}", v) for c, v in sorted(self.per_class_ap50.items())]
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name, value in self.rows():
                writer.writerow([name, f"{value:.6f}"])


def _interpolated_ap(scores: np.ndarray, matched: np.ndarray,
                     ignored: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from per-detection outcomes."""
    if n_gt == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    matched = matched[order]
    keep = ~ignored[order]
    matched = matched[keep]
    if matched.size == 0:
        return 0.0
    tp = np.cumsum(matched)
    fp = np.cumsum(~matched)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope: best precision at any recall >= r.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in _RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += env[idx] if idx < env.size else 0.0
    return ap / _RECALL_POINTS.size


def _match_image(det_boxes: np.ndarray, det_scores: np.ndarray,
                 gt_boxes: np.ndarray, gt_ignore: np.ndarray,
                 thr: float, bucket: tuple[float, float]):
    """Greedy matching of one image's detections of one class."""
    matched = np.zeros(len(det_boxes), dtype=bool)
    ignored = np.zeros(len(det_boxes), dtype=bool)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    overlaps = (iou_matrix(det_boxes, gt_boxes)
                if len(det_boxes) and len(gt_boxes) else
                np.zeros((len(det_boxes), len(gt_boxes))))
    for d in np.argsort(-det_scores, kind="stable"):
        best, best_iou = -1, thr
        # Prefer real ground truths; fall back to ignored ones.
        for pass_ignored in (False, True):
            for g in range(len(gt_boxes)):
                if taken[g] or gt_ignore[g] != pass_ignored:
                    continue
                if overlaps[d, g] >= best_iou:
                    best, best_iou = g, overlaps[d, g]
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            if gt_ignore[best]:
                ignored[d] = True
            else:
                matched[d] = True
        else:
            area = ((det_boxes[d, 2] - det_boxes[d, 0])
                    * (det_boxes[d, 3] - det_boxes[d, 1]))
            if not bucket[0] <= area < bucket[1]:
                ignored[d] = True
    return matched, ignored


def evaluate_map(detections: list[Detections], gts: list[Sample],
                 iou_thresholds: tuple[float, ...] = COCO_THRESHOLDS,
                 num_classes: int | None = None) -> MapReport:
    """Evaluate per-image detections against ground truths.

    Classes with no ground truth anywhere are excluded from every mean.
    """
    if len(detections) != len(gts):
        raise ValueError("detections/ground-truth image counts differ")
    if num_classes is None:
        num_classes = max((int(s.labels.max()) for s in gts if len(s.labels)),
                          default=0)
    classes = [c for c in range(1, num_classes + 1)
               if any((s.labels == c).any() for s in gts)]

    ap = {}  # (class, threshold, bucket) -> AP
    for bucket_name, bucket in AREA_BUCKETS.items():
        for c in classes:
            for thr in iou_thresholds:
                scores_all, matched_all, ignored_all = [], [], []
                n_gt = 0
                for det, gt in zip(detections, gts):
                    gmask = gt.labels == c
                    gt_boxes = gt.boxes[gmask]
                    areas = ((gt_boxes[:, 2] - gt_boxes[:, 0])
                             * (gt_boxes[:, 3] - gt_boxes[:, 1]))
                    gt_ignore = ~((areas >= bucket[0]) & (areas < bucket[1]))
                    n_gt += int((~gt_ignore).sum())
                    dmask = det.labels == c
                    m, ig = _match_image(det.boxes[dmask], det.scores[dmask],
                                         gt_boxes, gt_ignore, thr, bucket)
                    scores_all.append(det.scores[dmask])
                    matched_all.append(m)
                    ignored_all.append(ig)
                ap[(c, thr, bucket_name)] = _interpolated_ap(
                    np.concatenate(scores_all) if scores_all else np.zeros(0),
                    np.concatenate(matched_all) if matched_all else np.zeros(0, bool),
                    np.concatenate(ignored_all) if ignored_all else np.zeros(0, bool),
                    n_gt)

    def mean_over(thrs, bucket):
        vals = [ap[(c, t, bucket)] for c in classes for t in thrs
                if not np.isnan(ap[(c, t, bucket)])]
        return float(np.mean(vals)) if vals else 0.0

    return MapReport(
        ap=mean_over(iou_thresholds, "all"),
        ap50=(mean_over([0.5], "all") if 0.5 in iou_thresholds else 0.0),
        ap75=(mean_over([0.75], "all") if 0.75 in iou_thresholds else 0.0),
        ap_small=mean_over(iou_thresholds, "small"),
        ap_medium=mean_over(iou_thresholds, "medium"),
        ap_large=mean_over(iou_thresholds, "large"),
        per_class_ap50={c: ap[(c, 0.5, "all")] for c in classes}
        if 0.5 in iou_thresholds else {},
    )
