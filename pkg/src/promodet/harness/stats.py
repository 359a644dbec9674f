"""Anchor-census reporting: CSV tables and bar charts.

Aggregates, over a dataset, the positive/negative/ignored counts and the
positive-IoU histogram for three stages: the initial anchor grid, the
promoted anchors, and the promoted anchors after gating easy negatives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .. import anchors as anchor_lib  # noqa: E402
from ..anchors import ImbalanceStats  # noqa: E402
from ..detector import Detector  # noqa: E402
from .config import ExperimentConfig  # noqa: E402
from .data import Sample  # noqa: E402
from .train import images_to_tensor  # noqa: E402

STAGE_NAMES = ("initial", "promoted", "promoted_gated")
CSV_COLUMNS = ("stage", "positives", "negatives", "ignored",
               "bin_0.5", "bin_0.6", "bin_0.7", "bin_0.8", "bin_0.9")


@dataclass
class CensusReport:
    totals: dict[str, ImbalanceStats]
    images: int

    def rows(self) -> list[dict]:
        out = []
        for stage in STAGE_NAMES:
            s = self.totals[stage]
            row = {"stage": stage, "positives": s.positive_count,
                   "negatives": s.negative_count, "ignored": s.ignored_count}
            for k, edge in enumerate(("0.5", "0.6", "0.7", "0.8", "0.9")):
                row[f"bin_{edge}"] = s.iou_histogram[k]
            out.append(row)
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)


def _accumulate(total: ImbalanceStats | None, s: ImbalanceStats) -> ImbalanceStats:
    if total is None:
        return s
    return ImbalanceStats(
        total.positive_count + s.positive_count,
        total.negative_count + s.negative_count,
        total.ignored_count + s.ignored_count,
        tuple(a + b for a, b in zip(total.iou_histogram, s.iou_histogram)))


def census_over_dataset(model: Detector, dataset: list[Sample],
                        config: ExperimentConfig) -> CensusReport:
    """Run the promotion forward pass on every image and census the matches."""
    model.eval()
    totals: dict[str, ImbalanceStats | None] = {s: None for s in STAGE_NAMES}
    pos_thr = config.match.pos_threshold
    neg_thr = config.match.neg_threshold
    with torch.no_grad():
        for sample in dataset:
            apm_out, _ = model(images_to_tensor([sample]))
            promoted = model.promote_batch(apm_out, 1)[0]
            before, after = anchor_lib.census(
                model.anchor_set.boxes, promoted.boxes, sample.boxes,
                match_fn=lambda a, g: anchor_lib.match(a, g, pos_thr, neg_thr))
            gated = anchor_lib.stats_of(anchor_lib.gate_negatives(
                anchor_lib.match(promoted.boxes, sample.boxes, pos_thr, neg_thr),
                promoted.scores, config.apm.theta))
            totals["initial"] = _accumulate(totals["initial"], before)
            totals["promoted"] = _accumulate(totals["promoted"], after)
            totals["promoted_gated"] = _accumulate(totals["promoted_gated"], gated)
    return CensusReport(totals=totals, images=len(dataset))


def plot_census(report: CensusReport, out_dir: str | Path) -> list[Path]:
    """Bar charts: per-stage sample counts and the positive-IoU histograms."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    stages = STAGE_NAMES
    x = np.arange(len(stages))
    pos = [report.totals[s].positive_count / report.images for s in stages]
    neg = [report.totals[s].negative_count / report.images for s in stages]
    ax.bar(x - 0.2, pos, width=0.4, label="positives")
    ax.bar(x + 0.2, neg, width=0.4, label="negatives")
    ax.set_xticks(x, stages)
    ax.set_yscale("log")
    ax.set_ylabel("anchors per image")
    ax.set_title("Foreground/background census")
    ax.legend()
    path = out_dir / "census_counts.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    edges = ["0.5-0.6", "0.6-0.7", "0.7-0.8", "0.8-0.9", "0.9-1.0"]
    x = np.arange(len(edges))
    before = np.array(report.totals["initial"].iou_histogram) / report.images
    after = np.array(report.totals["promoted"].iou_histogram) / report.images
    ax.bar(x - 0.2, before, width=0.4, label="before promotion")
    ax.bar(x + 0.2, after, width=0.4, label="after promotion")
    ax.set_xticks(x, edges)
    ax.set_xlabel("IoU range")
    ax.set_ylabel("positive anchors per image")
    ax.set_title("Positive anchors by IoU")
    ax.legend()
    path = out_dir / "census_iou_histogram.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths
