"""Procedural synthetic segmentation data and training-time augmentation.

Images are 3-channel float maps in [0, 1]; labels are integer class maps
with 255 as the ignore value. Class 0 is the background. Two of the object
classes share an identical local texture; which one an image contains is
revealed only by the orientation of the background stripes, so resolving
them needs long-range context rather than local color.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .io import read_dgt, write_dgt
from .layers import resample_bilinear_nd, resize_nearest_nd
from .tensor import rng_for

IGNORE = 255


@dataclass
class SynthSpec:
    image_size: int = 64
    class_count: int = 4
    shapes_min: int = 3
    shapes_max: int = 6
    noise: float = 0.05
    ambiguous_frac: float = 0.6
    seed: int = 0

    def validate(self):
        if self.class_count < 4:
            raise ValueError("the generator needs at least 4 classes "
                             "(background, one plain, two ambiguous)")
        if not 0 < self.shapes_min <= self.shapes_max:
            raise ValueError("bad shapes-per-image range")
        if self.image_size < 16:
            raise ValueError("image_size too small")
        return self


# class textures: stripe colors (a, b) and orientation; the two ambiguous
# classes reuse one entry so their pixels are indistinguishable locally
_PLAIN_COLORS = ((0.85, 0.25, 0.25), (0.25, 0.75, 0.85))
_AMBIG_COLORS = ((0.25, 0.8, 0.3), (0.8, 0.3, 0.8))
_STRIPE_PERIOD = 4
_BG_PERIOD = 8
_BG_BASE = 0.45
_BG_AMP = 0.12


def _stripe_texture(size, colors, horizontal):
    yy, xx = np.mgrid[0:size, 0:size]
    phase = (yy if horizontal else xx) // (_STRIPE_PERIOD // 2) % 2
    a = np.asarray(colors[0], dtype=np.float32)[:, None, None]
    b = np.asarray(colors[1], dtype=np.float32)[:, None, None]
    return np.where(phase[None] == 0, a, b)


def _background(size, mode):
    # diagonal stripes; the diagonal's direction is the image-level cue
    yy, xx = np.mgrid[0:size, 0:size]
    phase = (xx + yy) if mode == 0 else (xx - yy)
    wave = np.sin(2 * np.pi * phase / _BG_PERIOD).astype(np.float32)
    img = np.empty((3, size, size), dtype=np.float32)
    img[0] = _BG_BASE + _BG_AMP * wave
    img[1] = _BG_BASE + _BG_AMP * wave
    img[2] = _BG_BASE - _BG_AMP * wave
    return img


def _shape_mask(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:  # axis-aligned rectangle
        w = int(rng.integers(size // 8, size // 3 + 1))
        h = int(rng.integers(size // 8, size // 3 + 1))
        x0 = int(rng.integers(0, size - w))
        y0 = int(rng.integers(0, size - h))
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == 1:  # disc
        r = int(rng.integers(size // 10, size // 5 + 1))
        cx = int(rng.integers(r, size - r))
        cy = int(rng.integers(r, size - r))
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    # stripe region: a full-width band, horizontal or vertical
    w = int(rng.integers(size // 12, size // 6 + 1))
    p0 = int(rng.integers(0, size - w))
    if rng.random() < 0.5:
        return (yy >= p0) & (yy < p0 + w)
    return (xx >= p0) & (xx < p0 + w)


def gen_synthetic(spec: SynthSpec, split: str, index: int):
    """Deterministic (seed, split, index) -> (image (3,S,S) f32, labels (S,S) i32)."""
    spec.validate()
    rng = rng_for(spec.seed, f"synth-{split}", index)
    size = spec.image_size
    mode = int(rng.integers(0, 2))           # selects which ambiguous class appears
    img = _background(size, mode)
    labels = np.zeros((size, size), dtype=np.int32)

    plain_tex = _stripe_texture(size, _PLAIN_COLORS, horizontal=True)
    ambig_tex = _stripe_texture(size, _AMBIG_COLORS, horizontal=False)

    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(count):
        kind = int(rng.integers(0, 3))
        mask = _shape_mask(kind, size, rng)
        if rng.random() < spec.ambiguous_frac:
            cls = 2 + mode
            tex = ambig_tex
        else:
            cls = 1
            tex = plain_tex
        img[:, mask] = tex[:, mask]
        labels[mask] = cls

    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


def augment(image: np.ndarray, labels: np.ndarray, crop: int,
            scale_range=(0.5, 2.0), rng=None):
    """Random scale (bilinear image / nearest labels), horizontal flip with
    probability 0.5, then a random crop to ``crop``, padding with zeros /
    the ignore value when the scaled image is smaller."""
    factor = float(rng.uniform(scale_range[0], scale_range[1]))
    s = image.shape[-1]
    new = max(1, round(s * factor))
    if new != s:
        image = resample_bilinear_nd(image, new, new)
        labels = resize_nearest_nd(labels, new, new)
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    h, w = labels.shape
    if h < crop or w < crop:
        ph, pw = max(0, crop - h), max(0, crop - w)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE)
        h, w = labels.shape
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    return (np.ascontiguousarray(image[:, y0: y0 + crop, x0: x0 + crop]),
            np.ascontiguousarray(labels[y0: y0 + crop, x0: x0 + crop]))


# -- on-disk dataset -------------------------------------------------------------


def dataset_paths(root, split, index):
    return (os.path.join(root, f"img_{split}_{index:05d}.dgt"),
            os.path.join(root, f"lbl_{split}_{index:05d}.dgt"))


def write_dataset(spec: SynthSpec, train_count: int, val_count: int, root: str):
    os.makedirs(root, exist_ok=True)
    for split, count in (("train", train_count), ("val", val_count)):
        for i in range(count):
            img, lab = gen_synthetic(spec, split, i)
            img_path, lbl_path = dataset_paths(root, split, i)
            write_dgt(img_path, img)
            write_dgt(lbl_path, lab.astype(np.float32))
    manifest = {
        "image_size": spec.image_size,
        "class_count": spec.class_count,
        "train_count": train_count,
        "val_count": val_count,
        "shapes_min": spec.shapes_min,
        "shapes_max": spec.shapes_max,
        "noise": spec.noise,
        "ambiguous_frac": spec.ambiguous_frac,
        "seed": spec.seed,
    }
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


class Dataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root: str):
        manifest_path = os.path.join(root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}; "
                                    "run gen-data first")
        with open(manifest_path) as f:
            self.meta = json.load(f)
        self.root = root
        self.images = {}
        self.labels = {}
        for split in ("train", "val"):
            n = self.meta[f"{split}_count"]
            imgs, labs = [], []
            for i in range(n):
                img_path, lbl_path = dataset_paths(root, split, i)
                imgs.append(read_dgt(img_path).astype(np.float32))
                labs.append(read_dgt(lbl_path).astype(np.int32))
            self.images[split] = imgs
            self.labels[split] = labs

    @property
    def class_count(self):
        return self.meta["class_count"]

    def count(self, split):
        return self.meta[f"{split}_count"]
