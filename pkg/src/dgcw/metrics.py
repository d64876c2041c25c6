"""Evaluation and diagnostics: confusion-matrix mIoU, multi-scale and
flipped inference, dataset-wide class average features, the per-channel
across-class variance vector, and its histogram."""

from __future__ import annotations

import numpy as np

from .layers import resample_bilinear_nd, resize_nearest_nd
from .tensor import Tensor, no_grad

IGNORE = 255


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, class_count: int,
                     ignore_index: int = IGNORE) -> np.ndarray:
    """K x K integer counts, rows = ground truth, columns = prediction."""
    p = np.asarray(pred).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    valid = t != ignore_index
    p, t = p[valid], t[valid]
    if p.size and (p.min() < 0 or p.max() >= class_count):
        raise ValueError("prediction out of class range")
    if t.size and (t.min() < 0 or t.max() >= class_count):
        raise ValueError("label out of class range")
    flat = np.bincount(t.astype(np.int64) * class_count + p.astype(np.int64),
                       minlength=class_count * class_count)
    return flat.reshape(class_count, class_count)


def miou(cm: np.ndarray):
    """Mean intersection-over-union. Classes absent from both prediction and
    truth are excluded; their per-class entry is NaN."""
    cm = np.asarray(cm, dtype=np.float64)
    k = cm.shape[0]
    if k < 2:
        raise ValueError("need at least 2 classes")
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    per_class = np.full(k, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        return 0.0, per_class
    return float(per_class[present].mean()), per_class


def _round8(x: float) -> int:
    return max(8, int(round(x / 8)) * 8)


def ms_flip_infer(image: np.ndarray, net, scales, flip: bool) -> np.ndarray:
    """Sum of prediction maps over scaled (and mirrored) copies of the
    input. Each scale resizes the image (extents rounded to multiples of 8),
    runs the network, and resizes the logits back before summing."""
    if not scales:
        raise ValueError("scales must be non-empty")
    dtype = net.classifier.weight.dtype
    img = np.asarray(image, dtype=dtype)
    n, c, h, w = img.shape
    total = None
    for s in scales:
        sh, sw = _round8(h * s), _round8(w * s)
        scaled = resample_bilinear_nd(img, sh, sw) if (sh, sw) != (h, w) else img
        variants = [scaled]
        if flip:
            variants.append(np.ascontiguousarray(scaled[:, :, :, ::-1]))
        for vi, var in enumerate(variants):
            with no_grad():
                out = net(Tensor(var)).main_logits.data
            if vi == 1:
                out = out[:, :, :, ::-1]
            if (sh, sw) != (h, w):
                out = resample_bilinear_nd(out, h, w)
            total = out.copy() if total is None else total + out
    return total


def evaluate(net, images, labels, class_count, scales=(1.0,), flip=False,
             batch_size=8):
    """Confusion matrix over a list of (3,H,W) images / (H,W) labels."""
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    preds = []
    for i in range(0, len(images), batch_size):
        batch = np.stack(images[i: i + batch_size])
        logits = ms_flip_infer(batch, net, scales, flip)
        pred = logits.argmax(axis=1)
        for j, p in enumerate(pred):
            cm += confusion_matrix(p, labels[i + j], class_count)
            preds.append(p.astype(np.int32))
    return cm, preds


# -- class-feature diagnostics -----------------------------------------------------


def class_feature_sums(features: np.ndarray, labels: np.ndarray, class_count: int):
    """Per-class channel sums and pixel counts for one batch. Labels are
    nearest-downsampled to the feature grid; mergeable across workers by
    plain addition."""
    n, d, h, w = features.shape
    lab = resize_nearest_nd(np.asarray(labels), h, w)
    sums = np.zeros((class_count, d), dtype=np.float64)
    counts = np.zeros(class_count, dtype=np.int64)
    flat_f = np.moveaxis(features, 1, 3).reshape(-1, d)
    flat_l = lab.reshape(-1)
    valid = flat_l != IGNORE
    flat_f, flat_l = flat_f[valid], flat_l[valid]
    np.add.at(sums, flat_l, flat_f)
    counts += np.bincount(flat_l, minlength=class_count).astype(np.int64)
    return sums, counts


class ClassStats:
    """Dataset-wide class average feature vectors and the per-channel
    across-class (population) variance of the present classes."""

    def __init__(self, sums: np.ndarray, counts: np.ndarray):
        self.counts = counts
        present = counts > 0
        if present.sum() < 2:
            raise ValueError("need at least 2 present classes for a variance")
        self.class_avg = np.full_like(sums, np.nan)
        self.class_avg[present] = sums[present] / counts[present, None]
        avg = self.class_avg[present]
        self.variance = avg.var(axis=0)          # population, across classes
        self.present = present

    @property
    def mean_variance(self) -> float:
        return float(self.variance.mean())


def collect_class_stats(net, images, labels, class_count, batch_size=8) -> ClassStats:
    dtype = net.classifier.weight.dtype
    sums = None
    counts = None
    for i in range(0, len(images), batch_size):
        batch = np.stack(images[i: i + batch_size]).astype(dtype)
        lab = np.stack(labels[i: i + batch_size])
        with no_grad():
            feats = net(Tensor(batch)).features.data
        s, c = class_feature_sums(feats, lab, class_count)
        sums = s if sums is None else sums + s
        counts = c if counts is None else counts + c
    return ClassStats(sums, counts)


def variance_histogram(variance: np.ndarray, bin_edges: np.ndarray) -> np.ndarray:
    """Channel counts per variance interval; bins are left-closed and
    right-open except the last, which is closed."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    v = np.asarray(variance, dtype=np.float64)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    for x in v:
        if x < edges[0] or x > edges[-1]:
            continue
        idx = int(np.searchsorted(edges, x, side="right")) - 1
        counts[min(idx, len(counts) - 1)] += 1
    return counts
