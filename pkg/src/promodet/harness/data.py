"""Datasets and augmentation.

The synthetic generator paints 1-5 solid primitives (circle=1, square=2,
triangle=3) over low-frequency textured noise. Everything derives from a
per-image seeded generator, so a given (seed, index) pair reproduces the
sample bit for bit. Object sides are drawn log-uniformly between 5% and 60%
of the image so the small/medium/large area regimes all occur.

Augmentation follows the classic single-shot recipe: horizontal flip,
mean-filled canvas expansion up to 4x, an IoU-constrained random crop that
keeps boxes whose centers fall inside the patch, then a resize to the
network input size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..geometry import iou_matrix

CLASS_NAMES = ("circle", "square", "triangle")

_CROP_OPTIONS = (None, 0.1, 0.3, 0.5, 0.7, 0.9, 0.0)


@dataclass
class Sample:
    image: np.ndarray     # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray     # (G, 4) float64 corner form, inside bounds
    labels: np.ndarray    # (G,) int64, 1-based category ids
    image_id: int = 0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3)).astype(np.float32)
    t = torch.from_numpy(coarse).permute(2, 0, 1)[None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    img = up[0].permute(1, 2, 0).numpy()
    img += rng.normal(0.0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _contrast_color(rng: np.random.Generator) -> np.ndarray:
    # Push channels toward the extremes so shapes stand out from the texture.
    base = rng.uniform(0.0, 1.0, size=3)
    return np.where(base < 0.5, base * 0.4, 0.6 + base * 0.4).astype(np.float32)


def _draw_shape(img: np.ndarray, rng: np.random.Generator, size: int,
                cls: int) -> np.ndarray:
    side = float(np.exp(rng.uniform(np.log(0.05), np.log(0.60)))) * size
    side = max(side, 4.0)
    cx = rng.uniform(side / 2, size - side / 2)
    cy = rng.uniform(side / 2, size - side / 2)
    ys, xs = np.mgrid[0:size, 0:size]
    ys = ys + 0.5
    xs = xs + 0.5
    if cls == 1:       # circle
        r = side / 2
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif cls == 2:     # square
        mask = ((np.abs(xs - cx) <= side / 2) & (np.abs(ys - cy) <= side / 2))
    else:              # upward triangle
        top = cy - side / 2
        bot = cy + side / 2
        frac = np.clip((ys - top) / side, 0.0, 1.0)
        mask = (ys >= top) & (ys <= bot) & (np.abs(xs - cx) <= frac * side / 2)
    img[mask] = _contrast_color(rng)
    box = np.array([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2])
    return np.clip(box, 0.0, size)


def synth_dataset(n_images: int, seed: int, image_size: int = 384,
                  min_objects: int = 1, max_objects: int = 5) -> list[Sample]:
    """Deterministic synthetic-shapes detection set."""
    if n_images < 1:
        raise ValueError("need at least one image")
    samples = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        img = _texture(rng, image_size)
        count = int(rng.integers(min_objects, max_objects + 1))
        boxes = []
        labels = []
        for _ in range(count):
            cls = int(rng.integers(1, 4))
            boxes.append(_draw_shape(img, rng, image_size, cls))
            labels.append(cls)
        samples.append(Sample(image=img, boxes=np.asarray(boxes, dtype=np.float64),
                              labels=np.asarray(labels, dtype=np.int64),
                              image_id=i))
    return samples


def resize_sample(sample: Sample, size: int) -> Sample:
    h, w = sample.image.shape[:2]
    if (h, w) == (size, size):
        return sample
    t = torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    boxes = sample.boxes.copy()
    boxes[:, 0::2] *= size / w
    boxes[:, 1::2] *= size / h
    return replace(sample, image=out[0].permute(1, 2, 0).numpy(), boxes=boxes)


def _flip(sample: Sample) -> Sample:
    w = sample.image.shape[1]
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]),
                   boxes=boxes)


def _expand(sample: Sample, rng: np.random.Generator) -> Sample:
    h, w = sample.image.shape[:2]
    ratio = rng.uniform(1.0, 4.0)
    nh, nw = int(h * ratio), int(w * ratio)
    top = int(rng.uniform(0, nh - h))
    left = int(rng.uniform(0, nw - w))
    canvas = np.empty((nh, nw, 3), dtype=sample.image.dtype)
    canvas[:] = sample.image.mean(axis=(0, 1))
    canvas[top:top + h, left:left + w] = sample.image
    boxes = sample.boxes.copy()
    boxes[:, 0::2] += left
    boxes[:, 1::2] += top
    return replace(sample, image=canvas, boxes=boxes)


def _try_crop(sample: Sample, rng: np.random.Generator) -> Sample | None:
    h, w = sample.image.shape[:2]
    option = _CROP_OPTIONS[rng.integers(len(_CROP_OPTIONS))]
    if option is None:
        return sample
    for _ in range(10):
        cw = rng.uniform(0.3, 1.0) * w
        ch = rng.uniform(0.3, 1.0) * h
        if not 0.5 <= cw / ch <= 2.0:
            continue
        left = rng.uniform(0, w - cw)
        top = rng.uniform(0, h - ch)
        patch = np.array([left, top, left + cw, top + ch])
        overlaps = iou_matrix(patch[None], sample.boxes)[0]
        if overlaps.max() < option:
            continue
        centers_x = (sample.boxes[:, 0] + sample.boxes[:, 2]) / 2
        centers_y = (sample.boxes[:, 1] + sample.boxes[:, 3]) / 2
        inside = ((centers_x > patch[0]) & (centers_x < patch[2])
                  & (centers_y > patch[1]) & (centers_y < patch[3]))
        if not inside.any():
            continue
        boxes = sample.boxes[inside].copy()
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], patch[0], patch[2]) - patch[0]
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], patch[1], patch[3]) - patch[1]
        il, it = int(round(left)), int(round(top))
        iw, ih = int(round(cw)), int(round(ch))
        il = min(il, w - 1)
        it = min(it, h - 1)
        image = sample.image[it:it + ih, il:il + iw]
        return replace(sample, image=image, boxes=boxes,
                       labels=sample.labels[inside])
    return None


def augment(sample: Sample, seed, input_size: int | None = None,
            max_retries: int = 5) -> Sample:
    """Randomized flip / expand / crop / resize pipeline.

    ``seed`` may be an int or a sequence of ints (e.g. (run seed, epoch,
    sample index)); a given seed fixes the result. If every crop attempt
    would eliminate all boxes, falls back to the flipped-only sample.
    Output boxes always stay inside bounds with positive area.
    """
    rng = np.random.default_rng(seed)
    out = sample
    if rng.uniform() < 0.5:
        out = _flip(out)
    flipped_only = out
    if len(sample.boxes) == 0:
        return flipped_only if input_size is None else resize_sample(flipped_only,
                                                                     input_size)
    if rng.uniform() < 0.5:
        out = _expand(out, rng)
    cropped = None
    for _ in range(max_retries):
        cropped = _try_crop(out, rng)
        if cropped is not None and len(cropped.boxes):
            break
        cropped = None
    out = cropped if cropped is not None else flipped_only
    if input_size is not None:
        out = resize_sample(out, input_size)
    # Degenerate slivers can appear after clipping narrow boxes to the patch.
    keep = ((out.boxes[:, 2] - out.boxes[:, 0]) > 1e-3) & \
           ((out.boxes[:, 3] - out.boxes[:, 1]) > 1e-3)
    if not keep.all():
        out = replace(out, boxes=out.boxes[keep], labels=out.labels[keep])
    if len(out.boxes) == 0:
        out = flipped_only if input_size is None else resize_sample(flipped_only,
                                                                    input_size)
    return out


def load_coco(annotations_path: str | Path, images_dir: str | Path,
              input_size: int | None = None) -> tuple[list[Sample], list[str]]:
    """Read a COCO-format annotation file into samples.

    Category ids are remapped to contiguous 1..C in sorted order; returns
    (samples, category names). Intended for small subsets.
    """
    from PIL import Image

    with open(annotations_path) as fh:
        coco = json.load(fh)
    cats = sorted(coco.get("categories", []), key=lambda c: c["id"])
    id_map = {c["id"]: k + 1 for k, c in enumerate(cats)}
    names = [c.get("name", str(c["id"])) for c in cats]
    by_image: dict[int, list[dict]] = {}
    for ann in coco.get("annotations", []):
        by_image.setdefault(ann["image_id"], []).append(ann)
    samples = []
    for info in coco.get("images", []):
        path = Path(images_dir) / info["file_name"]
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        boxes = []
        labels = []
        for ann in by_image.get(info["id"], []):
            x, y, w, h = ann["bbox"]
            if w <= 0 or h <= 0:
                continue
            boxes.append([x, y, x + w, y + h])
            labels.append(id_map[ann["category_id"]])
        sample = Sample(image=img,
                        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                        labels=np.asarray(labels, dtype=np.int64),
                        image_id=info["id"])
        if input_size is not None:
            sample = resize_sample(sample, input_size)
        samples.append(sample)
    return samples, names
