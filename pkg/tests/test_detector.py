import numpy as np
import pytest
import torch
import torch.nn.functional as F

from promodet.anchors import LevelConfig, generate_anchors
from promodet.apm import ApmOutput, promote_arrays
from promodet.detector import (Detections, DetectionOutput, Detector,
                               DetectorConfig, postprocess_detections,
                               smooth_l1, total_loss)
from promodet.geometry import BoxDeltas

from conftest import random_valid_boxes
from oracles import loss_oracle

TINY = dict(encoder_channels=(4, 4, 4, 4, 4), decoder_channels=8)


def tiny_detector(**kw):
    defaults = dict(input_size=128, num_classes=3, **TINY)
    defaults.update(kw)
    return Detector(DetectorConfig(**defaults)).eval()


class TestConfigValidation:
    def test_fam_on_coarse_levels_rejected(self):
        with pytest.raises(ValueError):
            DetectorConfig(fam_modes=("none",) * 4 + ("disentangled", "none"))

    def test_apm_branches_both_off_rejected(self):
        with pytest.raises(ValueError):
            DetectorConfig(apm_scoring=False, apm_adjustment=False)

    def test_fam_needs_promotion(self):
        with pytest.raises(ValueError):
            DetectorConfig(apm_enabled=False,
                           fam_modes=("disentangled",) * 4 + ("none", "none"))

    def test_implicit_mode_allowed_without_promotion(self):
        cfg = DetectorConfig(apm_enabled=False,
                             fam_modes=("implicit",) * 4 + ("none", "none"),
                             **TINY, input_size=128)
        Detector(cfg)

    def test_theta_domain(self):
        with pytest.raises(ValueError):
            DetectorConfig(theta=0.0)


class TestHeadShapes:
    def test_class_and_box_maps_384(self):
        model = Detector(DetectorConfig(input_size=384, num_classes=3, **TINY))
        model.eval()
        with torch.no_grad():
            apm_out, det_out = model(torch.randn(1, 3, 384, 384))
        # level 1: A=6, C=3 -> 24 class channels and 24 box channels at 48x48
        assert det_out.class_maps[0].shape == (1, 24, 48, 48)
        assert det_out.box_maps[0].shape == (1, 24, 48, 48)
        assert det_out.class_maps[4].shape == (1, 16, 3, 3)
        assert det_out.flat_class_logits().shape == (1, 18400, 4)
        assert det_out.flat_box_deltas().shape == (1, 18400, 4)

    def test_softmax_normalized(self):
        model = tiny_detector()
        with torch.no_grad():
            _, det_out = model(torch.randn(1, 3, 128, 128))
        probs = F.softmax(det_out.flat_class_logits(), dim=-1)
        torch.testing.assert_close(probs.sum(-1), torch.ones(1, 2048),
                                   rtol=1e-5, atol=1e-5)

    def test_none_mode_equals_plain_conv_head(self):
        model = tiny_detector(fam_modes=("none",) * 6)
        feat = torch.randn(1, 8, 16, 16)
        head = model.head.level1
        with torch.no_grad():
            trunk = head.trunk(feat)
            aligned = F.relu(F.conv2d(trunk, head.align.weight, head.align.bias,
                                      padding=1))
            expect_cls = head.cls(aligned)
            apm_out, det_out = None, model.head_forward(
                [feat] + [torch.randn(1, 8, s, s) for s in (8, 4, 2, 1, 1)],
                model.promotion_forward([feat] + [torch.randn(1, 8, s, s)
                                                  for s in (8, 4, 2, 1, 1)]))
        torch.testing.assert_close(det_out.class_maps[0], expect_cls,
                                   rtol=0, atol=1e-6)

    def test_coarse_levels_never_deformed(self):
        model = tiny_detector()
        assert not hasattr(model.fam, "level5")
        assert not hasattr(model.fam, "level6")

    def test_missing_adjustment_raises_for_explicit_modes(self):
        model = tiny_detector()
        pyramid = [torch.randn(1, 8, s, s) for s in (16, 8, 4, 2, 1, 1)]
        with pytest.raises(ValueError):
            model.head_forward(pyramid, None)


class TestSmoothL1:
    def test_zero(self):
        d = BoxDeltas(0.1, -0.2, 0.3, 0.4)
        assert smooth_l1(d, d) == 0.0

    def test_quadratic_region(self):
        assert smooth_l1(BoxDeltas(0.5, 0, 0, 0),
                         BoxDeltas(0, 0, 0, 0)) == pytest.approx(0.125)

    def test_linear_region(self):
        assert smooth_l1(BoxDeltas(2.0, 0, 0, 0),
                         BoxDeltas(0, 0, 0, 0)) == pytest.approx(1.5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            smooth_l1(BoxDeltas(float("nan"), 0, 0, 0), BoxDeltas(0, 0, 0, 0))


def synthetic_outputs(rng, anchor_set, num_classes=3, scale=2.0):
    """Hand-buildable single-image outputs over a one-level anchor set."""
    n = len(anchor_set)
    a = anchor_set.anchors_per_location[0]
    grid = anchor_set.grid_sizes[0]
    score_logits = rng.normal(0, scale, n)
    apm_deltas = rng.normal(0, 0.3, (n, 4))
    cls_logits = rng.normal(0, scale, (n, num_classes + 1))
    box_deltas = rng.normal(0, 0.3, (n, 4))

    def to_map(flat, channels_per_anchor):
        m = np.asarray(flat, dtype=np.float64).reshape(
            grid, grid, a, channels_per_anchor)
        return torch.from_numpy(m.transpose(2, 3, 0, 1).reshape(
            1, a * channels_per_anchor, grid, grid).copy())

    apm_out = ApmOutput(score_logits=[to_map(score_logits, 1)],
                        deltas=[to_map(apm_deltas, 4)],
                        anchors_per_location=(a,), grid_sizes=(grid,))
    det_out = DetectionOutput(class_maps=[to_map(cls_logits, num_classes + 1)],
                              box_maps=[to_map(box_deltas, 4)],
                              num_classes=num_classes,
                              anchors_per_location=(a,))
    return score_logits, apm_deltas, cls_logits, box_deltas, apm_out, det_out


def loss_test_anchor_set():
    level = LevelConfig(stride=16, base_scale=12, second_scale=16,
                        aspect_ratios=(1.0, 1.0, 2.0, 0.5, 3.0))
    return generate_anchors(32, (level,))  # 2x2 grid x 5 ratios = 20 anchors


class TestTotalLoss:
    def test_matches_scalar_oracle(self, rng):
        anchor_set = loss_test_anchor_set()
        for trial in range(20):
            (score_logits, apm_deltas, cls_logits, box_deltas,
             apm_out, det_out) = synthetic_outputs(rng, anchor_set)
            g = int(rng.integers(1, 4))
            gts = random_valid_boxes(rng, g, span=28, min_size=3)
            labels = rng.integers(1, 4, g)
            promoted = promote_arrays(anchor_set, apm_deltas,
                                      1 / (1 + np.exp(-score_logits)))
            report = total_loss(apm_out, det_out, anchor_set, [promoted],
                                [gts], [labels])
            ref = loss_oracle(score_logits, apm_deltas, cls_logits, box_deltas,
                              anchor_set.boxes, anchor_set.centers,
                              promoted.boxes, promoted.centers, gts, labels)
            got = report.as_floats()
            assert got["n_apm"] == ref["n_apm"]
            assert got["n_d"] == ref["n_d"]
            for key in ("l_b", "l_r_apm", "l_cls", "l_r_det", "total"):
                assert got[key] == pytest.approx(ref[key], rel=1e-5, abs=1e-5), key

    def test_perfect_predictions_minimize(self):
        anchor_set = loss_test_anchor_set()
        n = len(anchor_set)
        from promodet.anchors import POSITIVE, match
        from promodet.geometry import encode_boxes

        gts = np.array([[2.0, 2.0, 18.0, 18.0]])
        labels = np.array([2])
        m = match(anchor_set.boxes, gts)
        pos = m.labels == POSITIVE
        score_logits = np.where(pos, 40.0, -40.0)
        apm_deltas = np.zeros((n, 4))
        apm_deltas[pos] = encode_boxes(anchor_set.centers[pos],
                                       gts[m.matched_gt[pos]])
        promoted = promote_arrays(anchor_set, apm_deltas, np.where(pos, 1.0, 0.0))
        m2 = match(promoted.boxes, gts)
        pos2 = m2.labels == POSITIVE
        cls_logits = np.zeros((n, 4))
        cls_logits[pos2, 2] = 40.0
        cls_logits[~pos2, 0] = 40.0
        box_deltas = np.zeros((n, 4))
        box_deltas[pos2] = encode_boxes(promoted.centers[pos2],
                                        gts[m2.matched_gt[pos2]])

        a = anchor_set.anchors_per_location[0]
        grid = anchor_set.grid_sizes[0]

        def to_map(flat, cpa):
            arr = np.asarray(flat, dtype=np.float64).reshape(grid, grid, a, cpa)
            return torch.from_numpy(arr.transpose(2, 3, 0, 1).reshape(
                1, a * cpa, grid, grid).copy())

        apm_out = ApmOutput([to_map(score_logits, 1)], [to_map(apm_deltas, 4)],
                            (a,), (grid,))
        det_out = DetectionOutput([to_map(cls_logits, 4)],
                                  [to_map(box_deltas, 4)], 3, (a,))
        report = total_loss(apm_out, det_out, anchor_set, [promoted], [gts],
                            [labels])
        floats = report.as_floats()
        assert floats["l_r_apm"] == 0.0
        assert floats["l_r_det"] == 0.0
        assert floats["l_b"] < 1e-4
        assert floats["l_cls"] < 1e-4

    def test_empty_image_stays_finite(self, rng):
        anchor_set = loss_test_anchor_set()
        (_, apm_deltas, _, _, apm_out, det_out) = synthetic_outputs(
            rng, anchor_set)
        promoted = promote_arrays(anchor_set, apm_deltas,
                                  np.full(len(anchor_set), 0.5))
        report = total_loss(apm_out, det_out, anchor_set, [promoted],
                            [np.zeros((0, 4))], [np.zeros(0, dtype=np.int64)])
        floats = report.as_floats()
        assert floats["n_apm"] == 0 and floats["n_d"] == 0
        assert floats["l_r_apm"] == 0.0 and floats["l_r_det"] == 0.0
        assert np.isfinite(floats["total"])
        assert floats["l_cls"] > 0

    def test_gated_negatives_excluded_from_classification(self, rng):
        anchor_set = loss_test_anchor_set()
        (score_logits, apm_deltas, cls_logits, box_deltas,
         apm_out, det_out) = synthetic_outputs(rng, anchor_set, scale=8.0)
        gts = np.array([[2.0, 2.0, 18.0, 18.0]])
        labels = np.array([1])
        promoted = promote_arrays(anchor_set, apm_deltas,
                                  1 / (1 + np.exp(-score_logits)))
        full = total_loss(apm_out, det_out, anchor_set, [promoted], [gts],
                          [labels])
        # recompute with theta large enough to gate every negative
        gated = total_loss(apm_out, det_out, anchor_set, [promoted], [gts],
                           [labels], theta=0.999999)
        assert gated.as_floats()["l_cls"] < full.as_floats()["l_cls"]

    def test_batch_size_mismatch_rejected(self, rng):
        anchor_set = loss_test_anchor_set()
        (_, apm_deltas, _, _, apm_out, det_out) = synthetic_outputs(
            rng, anchor_set)
        promoted = promote_arrays(anchor_set, apm_deltas,
                                  np.full(len(anchor_set), 0.5))
        with pytest.raises(ValueError):
            total_loss(apm_out, det_out, anchor_set, [promoted, promoted],
                       [np.zeros((0, 4))], [np.zeros(0)])


class TestPostprocess:
    def _inputs(self, rng, n=40, num_classes=3):
        anchors = random_valid_boxes(rng, n, span=100, min_size=4)
        centers = np.stack([(anchors[:, 0] + anchors[:, 2]) / 2,
                            (anchors[:, 1] + anchors[:, 3]) / 2,
                            anchors[:, 2] - anchors[:, 0],
                            anchors[:, 3] - anchors[:, 1]], axis=1)
        deltas = rng.normal(0, 0.1, (n, 4))
        probs = rng.dirichlet(np.ones(num_classes + 1), n)
        scores = rng.uniform(0, 1, n)
        return centers, deltas, probs, scores

    def test_gate_drops_low_promotion_scores(self, rng):
        centers, deltas, probs, _ = self._inputs(rng)
        gate = np.zeros(len(centers))
        det = postprocess_detections(centers, deltas, probs, gate, 128)
        assert len(det) == 0

    def test_confidence_floor(self, rng):
        centers, deltas, probs, scores = self._inputs(rng)
        probs = np.full_like(probs, 1e-4)
        det = postprocess_detections(centers, deltas, probs, None, 128)
        assert len(det) == 0

    def test_uniform_softmax_with_many_classes_empty(self, rng):
        n, c = 20, 100
        centers, deltas, _, _ = self._inputs(rng, n=n)
        probs = np.full((n, c + 1), 1.0 / (c + 1))
        det = postprocess_detections(centers, deltas, probs, None, 128)
        assert len(det) == 0

    def test_top_k_truncation(self, rng):
        n = 400
        centers, deltas, _, _ = self._inputs(rng, n=n)
        # disjoint boxes so suppression never fires
        centers[:, 0] = np.arange(n) * 10.0 + 4
        centers[:, 1] = 4.0
        centers[:, 2:] = 2.0
        deltas[:] = 0.0
        probs = np.zeros((n, 4))
        probs[:, 1] = np.linspace(0.2, 0.9, n)
        det = postprocess_detections(centers, deltas, probs, None,
                                     image_size=n * 10, max_detections=300)
        assert len(det) == 300
        assert det.scores.min() >= np.sort(np.linspace(0.2, 0.9, n))[n - 300]

    def test_permutation_invariance(self, rng):
        centers, deltas, probs, scores = self._inputs(rng, n=60)
        det_a = postprocess_detections(centers, deltas, probs, scores, 128)
        perm = rng.permutation(60)
        det_b = postprocess_detections(centers[perm], deltas[perm], probs[perm],
                                       scores[perm], 128)
        order_a = np.lexsort((det_a.labels, -det_a.scores))
        order_b = np.lexsort((det_b.labels, -det_b.scores))
        np.testing.assert_allclose(det_a.scores[order_a], det_b.scores[order_b],
                                   atol=1e-12)
        np.testing.assert_allclose(det_a.boxes[order_a], det_b.boxes[order_b],
                                   atol=1e-9)
        np.testing.assert_array_equal(det_a.labels[order_a],
                                      det_b.labels[order_b])

    def test_boxes_clipped(self, rng):
        centers, deltas, probs, _ = self._inputs(rng)
        probs[:, 1] = 0.9
        det = postprocess_detections(centers, deltas * 5, probs, None, 64)
        assert det.boxes.min() >= 0
        assert det.boxes.max() <= 64


class TestInfer:
    def test_returns_detections_in_bounds(self, rng):
        model = tiny_detector()
        image = rng.uniform(0, 1, (128, 128, 3)).astype(np.float32)
        det = model.infer(image)
        assert isinstance(det, Detections)
        assert len(det) <= 300
        if len(det):
            assert det.boxes.min() >= 0 and det.boxes.max() <= 128

    def test_resizes_and_rescales(self, rng):
        model = tiny_detector()
        image = rng.uniform(0, 1, (96, 200, 3)).astype(np.float32)
        det = model.infer(image)
        if len(det):
            assert det.boxes[:, 2].max() <= 200
            assert det.boxes[:, 3].max() <= 96

    def test_records_serialization(self):
        det = Detections(boxes=np.array([[1.0, 2.0, 11.0, 22.0]]),
                         labels=np.array([2]), scores=np.array([0.75]))
        rec = det.to_records(image_id=7)[0]
        assert rec == {"image_id": 7, "category_id": 2,
                       "bbox": [1.0, 2.0, 10.0, 20.0], "score": 0.75}
