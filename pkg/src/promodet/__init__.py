"""Single-shot detector with anchor promotion and alignment-aware features."""

from .anchors import (AnchorSet, ImbalanceStats, LevelConfig, MatchResult,
                      census, gate_negatives, generate_anchors, match,
                      paper_level_configs)
from .apm import ApmOutput, PromotedAnchors, PromotionHead, promote
from .backbone import Backbone, BackboneConfig, CBR
from .detector import (Detections, DetectionOutput, Detector, DetectorConfig,
                       LossReport, smooth_l1, total_loss)
from .fam import (OffsetField, OffsetMode, OffsetNet, compute_offsets,
                  deform_sample, split_adjustment)
from .geometry import Box, BoxDeltas, decode, encode, iou, soft_nms_linear

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "ApmOutput", "Backbone", "BackboneConfig", "Box", "BoxDeltas",
    "CBR", "Detections", "DetectionOutput", "Detector", "DetectorConfig",
    "ImbalanceStats", "LevelConfig", "LossReport", "MatchResult", "OffsetField",
    "OffsetMode", "OffsetNet", "PromotedAnchors", "PromotionHead", "census",
    "compute_offsets", "decode", "deform_sample", "encode", "gate_negatives",
    "generate_anchors", "iou", "match", "paper_level_configs", "promote",
    "smooth_l1", "soft_nms_linear", "split_adjustment", "total_loss",
]
