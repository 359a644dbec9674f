import json

import numpy as np
import pytest

from promodet.harness.data import (Sample, _expand, _flip, augment, load_coco,
                                   resize_sample, synth_dataset)


class TestSynthDataset:
    def test_deterministic_bitwise(self):
        a = synth_dataset(4, seed=5, image_size=96)
        b = synth_dataset(4, seed=5, image_size=96)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.boxes, t.boxes)
            np.testing.assert_array_equal(s.labels, t.labels)

    def test_different_seeds_differ(self):
        a = synth_dataset(1, seed=5, image_size=96)[0]
        b = synth_dataset(1, seed=6, image_size=96)[0]
        assert not np.array_equal(a.image, b.image)

    def test_contract_16_images(self):
        samples = synth_dataset(16, seed=1, image_size=96)
        assert len(samples) == 16
        for s in samples:
            assert len(s.boxes) >= 1
            assert s.image.shape == (96, 96, 3)
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_boxes_valid_and_inside(self):
        for s in synth_dataset(32, seed=3, image_size=128):
            assert (s.boxes[:, 2] > s.boxes[:, 0]).all()
            assert (s.boxes[:, 3] > s.boxes[:, 1]).all()
            assert s.boxes.min() >= 0
            assert s.boxes.max() <= 128
            assert set(np.unique(s.labels)) <= {1, 2, 3}

    def test_class_histogram_roughly_uniform(self):
        counts = np.zeros(3)
        for s in synth_dataset(1000, seed=11, image_size=48):
            for lab in s.labels:
                counts[lab - 1] += 1
        expected = counts.sum() / 3
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # df=2 critical value at p=0.001
        assert chi2 < 13.82, counts

    def test_size_regimes_covered(self):
        # relative to a 384 input: small < 32px, large > 96px sides
        sides = []
        for s in synth_dataset(200, seed=2, image_size=384):
            sides.extend((s.boxes[:, 2] - s.boxes[:, 0]).tolist())
        sides = np.asarray(sides)
        assert (sides < 32).any()
        assert ((sides >= 32) & (sides <= 96)).any()
        assert (sides > 96).any()

    def test_rejects_empty_request(self):
        with pytest.raises(ValueError):
            synth_dataset(0, seed=1)


class TestAugment:
    def _sample(self):
        return synth_dataset(1, seed=9, image_size=64)[0]

    def test_flip_is_involution(self):
        s = self._sample()
        back = _flip(_flip(s))
        np.testing.assert_array_equal(back.image, s.image)
        np.testing.assert_allclose(back.boxes, s.boxes)

    def test_flip_reflects_boxes(self):
        s = Sample(image=np.zeros((10, 20, 3), dtype=np.float32),
                   boxes=np.array([[2.0, 1.0, 8.0, 5.0]]),
                   labels=np.array([1]))
        out = _flip(s)
        np.testing.assert_allclose(out.boxes, [[12.0, 1.0, 18.0, 5.0]])

    def test_expand_translates_boxes(self):
        class FakeRng:
            def __init__(self, ratio):
                self._vals = iter([ratio, 0.0, 0.0])

            def uniform(self, lo=0.0, hi=1.0):
                return next(self._vals)

        s = Sample(image=np.ones((10, 10, 3), dtype=np.float32) * 0.5,
                   boxes=np.array([[2.0, 3.0, 6.0, 7.0]]),
                   labels=np.array([1]))
        out = _expand(s, FakeRng(2.0))
        assert out.image.shape == (20, 20, 3)
        np.testing.assert_allclose(out.boxes, s.boxes)  # offset (0, 0)
        np.testing.assert_allclose(out.image[15, 15], [0.5, 0.5, 0.5])

    def test_deterministic_per_seed(self):
        s = self._sample()
        a = augment(s, seed=(3, 1, 2), input_size=64)
        b = augment(s, seed=(3, 1, 2), input_size=64)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_boxes_stay_inside_and_positive(self):
        s = self._sample()
        for seed in range(60):
            out = augment(s, seed=seed, input_size=64)
            assert out.image.shape == (64, 64, 3)
            assert len(out.boxes) >= 1
            assert out.boxes.min() >= -1e-6
            assert out.boxes.max() <= 64 + 1e-6
            assert ((out.boxes[:, 2] - out.boxes[:, 0]) > 0).all()
            assert ((out.boxes[:, 3] - out.boxes[:, 1]) > 0).all()

    def test_empty_boxes_pass_through(self):
        s = Sample(image=np.zeros((32, 32, 3), dtype=np.float32),
                   boxes=np.zeros((0, 4)), labels=np.zeros(0, dtype=np.int64))
        out = augment(s, seed=1, input_size=32)
        assert len(out.boxes) == 0


class TestResize:
    def test_boxes_scaled(self):
        s = Sample(image=np.zeros((32, 64, 3), dtype=np.float32),
                   boxes=np.array([[8.0, 8.0, 32.0, 16.0]]),
                   labels=np.array([1]))
        out = resize_sample(s, 128)
        assert out.image.shape == (128, 128, 3)
        np.testing.assert_allclose(out.boxes, [[16.0, 32.0, 64.0, 64.0]])


class TestCocoLoader:
    def test_round_trip(self, tmp_path):
        from PIL import Image

        img = (np.linspace(0, 255, 24 * 24 * 3).reshape(24, 24, 3)
               .astype(np.uint8))
        Image.fromarray(img).save(tmp_path / "img0.png")
        ann = {
            "images": [{"id": 5, "file_name": "img0.png", "width": 24,
                        "height": 24}],
            "annotations": [
                {"id": 1, "image_id": 5, "category_id": 17,
                 "bbox": [2.0, 3.0, 10.0, 8.0]},
                {"id": 2, "image_id": 5, "category_id": 44,
                 "bbox": [0.0, 0.0, 5.0, 5.0]},
                {"id": 3, "image_id": 5, "category_id": 17,
                 "bbox": [1.0, 1.0, 0.0, 4.0]},  # degenerate, dropped
            ],
            "categories": [{"id": 44, "name": "cat"}, {"id": 17, "name": "dog"}],
        }
        (tmp_path / "ann.json").write_text(json.dumps(ann))
        samples, names = load_coco(tmp_path / "ann.json", tmp_path)
        assert names == ["dog", "cat"]
        s = samples[0]
        assert s.image_id == 5
        assert s.image.shape == (24, 24, 3)
        assert len(s.boxes) == 2
        np.testing.assert_allclose(s.boxes[0], [2, 3, 12, 11])
        assert s.labels.tolist() == [1, 2]  # dog -> 1, cat -> 2
