"""Detection heads, the composite training loss, and end-to-end inference.

Every level's head is a 3x3 conv-BN-ReLU trunk followed by an alignment
convolution (deformable on the four fine levels, regular on the two coarse
ones whose maps are too small) and two sibling 3x3 convolutions producing
per-anchor class logits ((C+1)A channels, softmax over C+1) and box deltas
(4A channels).

Training couples two stages: the promotion branches are supervised against
the initial anchor matching, the detection branches against the matching of
the promoted anchors with easy negatives gated away by the promotion score.
Per stage, classification and regression sums are normalized by that
stage's positive count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import anchors as anchor_lib
from .anchors import AnchorSet, IGNORE, NEGATIVE, POSITIVE, generate_anchors, paper_level_configs
from .apm import ApmOutput, PromotedAnchors, PromotionHead, promote_arrays
from .backbone import CBR, PyramidDecoder, TinyEncoder
from .fam import OffsetMode, OffsetNet, compute_offsets, deform_sample, split_adjustment
from .geometry import BoxDeltas, center_to_corner, clip_boxes, decode_boxes, encode_boxes, soft_nms_linear

FAM_LEVELS = 4  # the two coarsest levels never get deformable sampling


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 384
    num_classes: int = 3
    encoder_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    decoder_channels: int = 256
    apm_enabled: bool = True
    apm_scoring: bool = True
    apm_adjustment: bool = True
    theta: float = 0.01
    fam_modes: tuple[str, ...] = ("disentangled",) * 4 + ("none", "none")
    fam_detach_adjustment: bool = False
    score_prior: float = 0.01

    def __post_init__(self):
        if len(self.fam_modes) != 6:
            raise ValueError("fam_modes needs one entry per level")
        modes = self.mode_enums()
        for k in (4, 5):
            if modes[k] is not OffsetMode.NONE:
                raise ValueError(f"level {k + 1} cannot carry offsets; its map "
                                 "is too small")
        if self.apm_enabled and not (self.apm_scoring or self.apm_adjustment):
            raise ValueError("promotion enabled but both branches are off")
        needs_adjustment = {OffsetMode.EXPLICIT_LOC, OffsetMode.EXPLICIT_SHAPE,
                            OffsetMode.EXPLICIT_CONCAT, OffsetMode.DISENTANGLED}
        if not self.apm_enabled and any(m in needs_adjustment for m in modes):
            raise ValueError("offset mode needs the adjustment branch but "
                             "promotion is disabled")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")

    def mode_enums(self) -> tuple[OffsetMode, ...]:
        return tuple(OffsetMode(m) for m in self.fam_modes)


@dataclass
class DetectionOutput:
    """Per-level class/box maps plus flattened views in anchor order."""

    class_maps: list[torch.Tensor]   # (B, (C+1)A, H, W)
    box_maps: list[torch.Tensor]     # (B, 4A, H, W)
    num_classes: int
    anchors_per_location: tuple[int, ...]

    def flat_class_logits(self) -> torch.Tensor:
        parts = []
        c1 = self.num_classes + 1
        for m, a in zip(self.class_maps, self.anchors_per_location):
            b, _, h, w = m.shape
            parts.append(m.view(b, a, c1, h, w).permute(0, 3, 4, 1, 2)
                         .reshape(b, h * w * a, c1))
        return torch.cat(parts, dim=1)

    def flat_box_deltas(self) -> torch.Tensor:
        parts = []
        for m, a in zip(self.box_maps, self.anchors_per_location):
            b, _, h, w = m.shape
            parts.append(m.view(b, a, 4, h, w).permute(0, 3, 4, 1, 2)
                         .reshape(b, h * w * a, 4))
        return torch.cat(parts, dim=1)


@dataclass
class LossReport:
    """The four loss sums and the positive counts normalizing them."""

    l_b: torch.Tensor
    l_r_apm: torch.Tensor
    l_cls: torch.Tensor
    l_r_det: torch.Tensor
    n_apm: int
    n_d: int

    def total(self) -> torch.Tensor:
        return ((self.l_b + self.l_r_apm) / max(self.n_apm, 1)
                + (self.l_cls + self.l_r_det) / max(self.n_d, 1))

    def as_floats(self) -> dict[str, float]:
        return {"l_b": float(self.l_b.detach()),
                "l_r_apm": float(self.l_r_apm.detach()),
                "l_cls": float(self.l_cls.detach()),
                "l_r_det": float(self.l_r_det.detach()),
                "n_apm": self.n_apm, "n_d": self.n_d,
                "total": float(self.total().detach())}


@dataclass
class Detections:
    """Final per-image detections in image-pixel coordinates."""

    boxes: np.ndarray    # (M, 4) corner form
    labels: np.ndarray   # (M,) category ids, 1-based (0 is background)
    scores: np.ndarray   # (M,)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def to_records(self, image_id: int) -> list[dict]:
        recs = []
        for (x1, y1, x2, y2), lab, sc in zip(self.boxes, self.labels, self.scores):
            recs.append({"image_id": int(image_id), "category_id": int(lab),
                         "bbox": [float(x1), float(y1),
                                  float(x2 - x1), float(y2 - y1)],
                         "score": float(sc)})
        return recs


def write_detection_records(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)


class _LevelHead(nn.Module):
    def __init__(self, channels: int, anchors: int, num_classes: int):
        super().__init__()
        self.trunk = CBR(channels, channels, 3)
        self.align = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, (num_classes + 1) * anchors, 3, padding=1)
        self.box = nn.Conv2d(channels, 4 * anchors, 3, padding=1)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        # Background-heavy prior keeps the dense softmax stable early on.
        with torch.no_grad():
            self.cls.bias.view(anchors, num_classes + 1)[:, 0] = float(
                np.log(99.0 * num_classes))
        nn.init.normal_(self.box.weight, std=0.01)
        nn.init.zeros_(self.box.bias)


class _Container(nn.Module):
    """Bare namespace module so state-dict keys read fam.levelN / head.levelN."""


class Detector(nn.Module):
    """Backbone, promotion, alignment and detection heads as one network."""

    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        cfg = self.config
        self.anchor_set: AnchorSet = generate_anchors(
            cfg.input_size, paper_level_configs(cfg.input_size))
        apl = self.anchor_set.anchors_per_location

        self.encoder = TinyEncoder(cfg.encoder_channels)
        self.decoder = PyramidDecoder(cfg.encoder_channels, cfg.decoder_channels)
        self.apm = (PromotionHead(cfg.decoder_channels, apl,
                                  scoring=cfg.apm_scoring,
                                  adjustment=cfg.apm_adjustment,
                                  score_prior=cfg.score_prior)
                    if cfg.apm_enabled else None)
        self.fam = _Container()
        for k, mode in enumerate(cfg.mode_enums()[:FAM_LEVELS], start=1):
            if mode is not OffsetMode.NONE:
                setattr(self.fam, f"level{k}",
                        OffsetNet(mode, cfg.decoder_channels, apl[k - 1]))
        self.head = _Container()
        for k, a in enumerate(apl, start=1):
            setattr(self.head, f"level{k}",
                    _LevelHead(cfg.decoder_channels, a, cfg.num_classes))

    # ------------------------------------------------------------------ forward

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.decoder(self.encoder(images))

    def promotion_forward(self, pyramid: list[torch.Tensor]) -> ApmOutput | None:
        return self.apm(pyramid) if self.apm is not None else None

    def head_forward(self, pyramid: list[torch.Tensor],
                     apm_out: ApmOutput | None) -> DetectionOutput:
        cfg = self.config
        modes = cfg.mode_enums()
        class_maps = []
        box_maps = []
        for k, feat in enumerate(pyramid, start=1):
            head: _LevelHead = getattr(self.head, f"level{k}")
            trunk = head.trunk(feat)
            if k <= FAM_LEVELS:
                mode = modes[k - 1]
                x_loc = x_shape = None
                if mode not in (OffsetMode.NONE, OffsetMode.IMPLICIT):
                    if apm_out is None:
                        raise ValueError(
                            f"offset mode {mode.value} on level {k} needs the "
                            "adjustment branch output")
                    delta_map = apm_out.delta_map(k - 1)
                    if cfg.fam_detach_adjustment:
                        delta_map = delta_map.detach()
                    x_loc, x_shape = split_adjustment(delta_map)
                net = getattr(self.fam, f"level{k}", None)
                offsets = compute_offsets(mode, trunk, x_loc, x_shape, net=net)
                aligned = deform_sample(trunk, offsets.composed(),
                                        head.align.weight, head.align.bias)
            else:
                aligned = head.align(trunk)
            aligned = F.relu(aligned)
            class_maps.append(head.cls(aligned))
            box_maps.append(head.box(aligned))
        return DetectionOutput(class_maps, box_maps, cfg.num_classes,
                               self.anchor_set.anchors_per_location)

    def forward(self, images: torch.Tensor):
        pyr = self.pyramid(images)
        apm_out = self.promotion_forward(pyr)
        det_out = self.head_forward(pyr, apm_out)
        return apm_out, det_out

    # ------------------------------------------------------------------ helpers

    def promote_batch(self, apm_out: ApmOutput | None,
                      batch_size: int) -> list[PromotedAnchors]:
        """Promoted anchors per image; identity promotion when disabled."""
        if apm_out is None:
            ident = PromotedAnchors(boxes=self.anchor_set.boxes.copy(),
                                    centers=self.anchor_set.centers.copy(),
                                    scores=np.ones(len(self.anchor_set)))
            return [ident for _ in range(batch_size)]
        deltas = apm_out.flat_deltas().detach().cpu().numpy()
        scores = apm_out.flat_scores().detach().cpu().numpy()
        return [promote_arrays(self.anchor_set, deltas[b], scores[b])
                for b in range(batch_size)]

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def infer(self, image: np.ndarray, max_detections: int = 300,
              confidence_floor: float = 0.01, nms_iou: float = 0.3) -> Detections:
        """Detect objects in one (H, W, 3) image with values in [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            h, w = image.shape[:2]
            size = self.config.input_size
            x = torch.from_numpy(np.ascontiguousarray(image)).float()
            x = x.permute(2, 0, 1)[None]
            if (h, w) != (size, size):
                x = F.interpolate(x, size=(size, size), mode="bilinear",
                                  align_corners=False)
            apm_out, det_out = self.forward((x - 0.5) / 0.5)
            promoted = self.promote_batch(apm_out, 1)[0]
            box_deltas = det_out.flat_box_deltas()[0].double().cpu().numpy()
            class_probs = F.softmax(det_out.flat_class_logits()[0], dim=-1)
            gate_scores = promoted.scores if (self.apm is not None
                                              and self.config.apm_scoring) else None
            det = postprocess_detections(
                promoted.centers, box_deltas, class_probs.double().cpu().numpy(),
                gate_scores, image_size=size, theta=self.config.theta,
                confidence_floor=confidence_floor, nms_iou=nms_iou,
                max_detections=max_detections)
            if (h, w) != (size, size):
                det.boxes[:, 0::2] *= w / size
                det.boxes[:, 1::2] *= h / size
                det.boxes = clip_boxes(det.boxes, w, h)
            return det
        finally:
            self.train(was_training)


def postprocess_detections(promoted_centers: np.ndarray, box_deltas: np.ndarray,
                           class_probs: np.ndarray,
                           gate_scores: np.ndarray | None, image_size: int,
                           theta: float = 0.01, confidence_floor: float = 0.01,
                           nms_iou: float = 0.3,
                           max_detections: int = 300) -> Detections:
    """Decode, gate, filter, per-class soft-NMS, rank, and clip.

    Order-invariant in the anchor enumeration (up to score ties): candidates
    below the promotion-score gate or the confidence floor are dropped, each
    class is suppressed independently with the linear kernel, and the global
    top ``max_detections`` by score survive, clipped to image bounds.
    """
    centers, _ = decode_boxes(promoted_centers, box_deltas, min_size=1e-3)
    boxes = center_to_corner(centers)
    keep = np.ones(boxes.shape[0], dtype=bool)
    if gate_scores is not None:
        keep &= gate_scores >= theta
    num_classes = class_probs.shape[1] - 1
    out_boxes, out_labels, out_scores = [], [], []
    for c in range(1, num_classes + 1):
        probs = class_probs[:, c]
        sel = keep & (probs >= confidence_floor)
        if not sel.any():
            continue
        kept_boxes, kept_scores, _ = soft_nms_linear(
            boxes[sel], probs[sel], iou_threshold=nms_iou,
            score_floor=confidence_floor)
        out_boxes.append(kept_boxes)
        out_labels.append(np.full(len(kept_scores), c, dtype=np.int64))
        out_scores.append(kept_scores)
    if not out_boxes:
        return Detections(np.zeros((0, 4)), np.zeros(0, dtype=np.int64),
                          np.zeros(0))
    all_boxes = np.concatenate(out_boxes)
    all_labels = np.concatenate(out_labels)
    all_scores = np.concatenate(out_scores)
    order = np.argsort(-all_scores, kind="stable")[:max_detections]
    return Detections(clip_boxes(all_boxes[order], image_size, image_size),
                      all_labels[order], all_scores[order])


# ---------------------------------------------------------------------- losses

def smooth_l1(pred: BoxDeltas, target: BoxDeltas) -> float:
    """Smooth L1 between two delta 4-tuples, summed over coordinates."""
    total = 0.0
    for d in (pred.dx - target.dx, pred.dy - target.dy,
              pred.dw - target.dw, pred.dh - target.dh):
        if not np.isfinite(d):
            raise ValueError("non-finite delta difference")
        ad = abs(d)
        total += 0.5 * d * d if ad < 1.0 else ad - 0.5
    return total


def _smooth_l1_sum(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    diff = pred - target
    ad = diff.abs()
    return torch.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5).sum()


def total_loss(apm_out: ApmOutput | None, det_out: DetectionOutput,
               anchor_set: AnchorSet, promoted: list[PromotedAnchors],
               gt_boxes: list[np.ndarray], gt_labels: list[np.ndarray],
               theta: float = 0.01, pos_thr: float = 0.5, neg_thr: float = 0.3,
               ohem_ratio: float | None = None,
               apm_negative_cap: int | None = None) -> LossReport:
    """Two-stage composite loss over a batch.

    Promotion-stage labels come from matching the initial anchors; the
    binary score loss runs over its positives and negatives (ignores
    excluded) and the coarse regression over its positives against
    encode(initial anchor, matched GT). Detection-stage labels come from
    matching the promoted anchors and gating easy negatives below ``theta``;
    softmax classification runs over the survivors (background target for
    negatives) and box regression over positives against encode(promoted
    anchor, matched GT). Each stage's sums are divided by max(count of its
    positives, 1).
    """
    cls_logits = det_out.flat_class_logits()
    box_deltas = det_out.flat_box_deltas()
    dtype = cls_logits.dtype
    device = cls_logits.device
    batch = cls_logits.shape[0]
    if len(promoted) != batch or len(gt_boxes) != batch or len(gt_labels) != batch:
        raise ValueError("batch size mismatch between outputs and targets")

    score_logits = apm_out.flat_score_logits() if apm_out is not None else None
    apm_deltas = apm_out.flat_deltas() if (apm_out is not None
                                           and apm_out.deltas[0] is not None) else None
    gate = (apm_out.flat_scores().detach().cpu().numpy()
            if apm_out is not None else None)

    zero = torch.zeros((), dtype=dtype, device=device)
    l_b, l_r_apm, l_cls, l_r_det = zero, zero.clone(), zero.clone(), zero.clone()
    n_apm = 0
    n_d = 0
    for b in range(batch):
        gts = np.asarray(gt_boxes[b], dtype=np.float64).reshape(-1, 4)
        labs = np.asarray(gt_labels[b], dtype=np.int64).reshape(-1)

        # Promotion stage against the untouched anchor grid.
        if apm_out is not None:
            m_apm = anchor_lib.match(anchor_set.boxes, gts, pos_thr, neg_thr)
            pos = m_apm.labels == POSITIVE
            n_apm += int(pos.sum())
            if score_logits is not None:
                sel = m_apm.labels != IGNORE
                if apm_negative_cap is not None:
                    sel = _cap_negatives(score_logits[b], m_apm.labels,
                                         apm_negative_cap)
                targets = torch.as_tensor((m_apm.labels[sel] == POSITIVE)
                                          .astype(np.float64),
                                          dtype=dtype, device=device)
                l_b = l_b + F.binary_cross_entropy_with_logits(
                    score_logits[b][torch.as_tensor(sel, device=device)],
                    targets, reduction="sum")
            if apm_deltas is not None and pos.any():
                tgt = encode_boxes(anchor_set.centers[pos],
                                   gts[m_apm.matched_gt[pos]])
                l_r_apm = l_r_apm + _smooth_l1_sum(
                    apm_deltas[b][torch.as_tensor(pos, device=device)],
                    torch.as_tensor(tgt, dtype=dtype, device=device))

        # Detection stage against the promoted anchors, easy negatives gated.
        m_det = anchor_lib.match(promoted[b].boxes, gts, pos_thr, neg_thr)
        if gate is not None:
            m_det = anchor_lib.gate_negatives(m_det, gate[b], theta)
        pos = m_det.labels == POSITIVE
        npos = int(pos.sum())
        n_d += npos
        cls_targets = np.zeros(len(anchor_set), dtype=np.int64)
        cls_targets[pos] = labs[m_det.matched_gt[pos]]
        sel = m_det.labels != IGNORE
        if ohem_ratio is not None:
            sel = _mine_hard_negatives(cls_logits[b], m_det.labels, cls_targets,
                                       ohem_ratio)
        l_cls = l_cls + F.cross_entropy(
            cls_logits[b][torch.as_tensor(sel, device=device)],
            torch.as_tensor(cls_targets[sel], device=device), reduction="sum")
        if npos:
            tgt = encode_boxes(promoted[b].centers[pos], gts[m_det.matched_gt[pos]])
            l_r_det = l_r_det + _smooth_l1_sum(
                box_deltas[b][torch.as_tensor(pos, device=device)],
                torch.as_tensor(tgt, dtype=dtype, device=device))

    return LossReport(l_b, l_r_apm, l_cls, l_r_det, n_apm, n_d)


def _cap_negatives(logits: torch.Tensor, labels: np.ndarray, cap: int) -> np.ndarray:
    """Keep positives plus at most ``cap`` hardest (highest-scoring) negatives."""
    sel = labels == POSITIVE
    neg = np.where(labels == NEGATIVE)[0]
    if neg.size > cap:
        hardness = logits.detach().cpu().numpy()[neg]
        neg = neg[np.argsort(-hardness, kind="stable")[:cap]]
    sel = sel.copy()
    sel[neg] = True
    return sel


def _mine_hard_negatives(cls_logits: torch.Tensor, labels: np.ndarray,
                         cls_targets: np.ndarray, ratio: float) -> np.ndarray:
    """Classic 3:1 mining: keep negatives with the largest softmax loss."""
    pos = labels == POSITIVE
    neg = np.where(labels == NEGATIVE)[0]
    budget = max(int(ratio * pos.sum()), 1)
    if neg.size > budget:
        with torch.no_grad():
            losses = F.cross_entropy(cls_logits[neg],
                                     torch.zeros(len(neg), dtype=torch.long,
                                                 device=cls_logits.device),
                                     reduction="none").cpu().numpy()
        neg = neg[np.argsort(-losses, kind="stable")[:budget]]
    sel = pos.copy()
    sel[neg] = True
    return sel
