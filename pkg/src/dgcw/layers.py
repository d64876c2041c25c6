"""Parameterized building blocks: linear maps (1x1 convolutions), dilated 3x3
convolutions, batch normalization, pooling, bilinear resampling, and the
segmentation cross-entropy loss."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    F64,
    ShapeError,
    Tensor,
    _node,
    matmul,
    reduce,
    relu,
    reshape,
    rng_for,
    transpose,
)


class Module:
    """Parameter container. Tensors assigned as attributes are parameters
    (requires_grad) or buffers (running statistics); submodules nest. Names
    walk attribute paths with dots, in sorted attribute order."""

    training = True

    def named_tensors(self, prefix=""):
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix=""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, mode: bool):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val.set_training(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.set_training(mode)
        return self

    def state_dict(self):
        return {name: t.data for name, t in self.named_tensors()}

    def load_state(self, tensors: dict):
        own = dict(self.named_tensors())
        if set(own) != set(tensors):
            missing = set(own) - set(tensors)
            extra = set(tensors) - set(own)
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in own.items():
            arr = tensors[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_params(module: Module, seed: int):
    """Deterministic per-parameter init keyed by the parameter path, so two
    networks sharing a sub-structure draw identical values for it. Weights:
    centered uniform scaled by 1/sqrt(fan-in); biases/shifts zero; scales
    one; running stats at (0, 1)."""
    for name, t in module.named_tensors():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            shape = t.shape
            fan_in = shape[1] * (shape[2] * shape[3] if len(shape) == 4 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            rng = rng_for(seed, "init", _stable_index(name))
            t.data = rng.uniform(-bound, bound, size=shape).astype(t.dtype)
        elif leaf in ("bias", "shift", "running_mean"):
            t.data = np.zeros(t.shape, dtype=t.dtype)
        elif leaf == "scale" or leaf == "running_var":
            t.data = np.ones(t.shape, dtype=t.dtype)
        else:
            raise ValueError(f"no init rule for parameter {name}")


def _stable_index(name: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


# -- linear maps -----------------------------------------------------------------


class Linear(Module):
    """Affine map on the last axis; equals a 1x1 convolution over pixels."""

    def __init__(self, in_ch: int, out_ch: int, dtype=F64):
        self.weight = Tensor(np.zeros((out_ch, in_ch), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        # x: (rows, in) -> (rows, out)
        if x.ndim != 2 or x.shape[1] != self.in_channels:
            raise ShapeError(f"linear expects (rows, {self.in_channels}), got {x.shape}")
        return matmul(x, transpose(self.weight, (1, 0))) + self.bias


def linear_1x1(x: Tensor, lin: Linear) -> Tensor:
    """Per-pixel affine map on an (N, C, H, W) tensor."""
    n, c, h, w = x.shape
    if c != lin.in_channels:
        raise ShapeError(f"channel mismatch: {c} vs {lin.in_channels}")
    flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    out = lin(flat)
    return transpose(reshape(out, (n, h, w, lin.out_channels)), (0, 3, 1, 2))


# -- convolution -------------------------------------------------------------------


class Conv2d(Module):
    """Cross-correlation with stride/padding/dilation. Default padding keeps
    odd-kernel stride-1 outputs the same spatial size."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, dilation=1, padding=None, dtype=F64):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.weight = Tensor(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0, dilation=1) -> Tensor:
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv channel mismatch: input {c}, weight {c2}")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :,
                    ki * dilation: ki * dilation + (ho - 1) * stride + 1: stride,
                    kj * dilation: kj * dilation + (wo - 1) * stride + 1: stride]
            out += np.moveaxis(np.tensordot(wd[:, :, ki, kj], xs, axes=([1], [1])), 0, 1)
    out += bias.data[None, :, None, None]

    def vjp(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                sl = (slice(None), slice(None),
                      slice(ki * dilation, ki * dilation + (ho - 1) * stride + 1, stride),
                      slice(kj * dilation, kj * dilation + (wo - 1) * stride + 1, stride))
                xs = xp[sl]
                gw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                gxp[sl] += np.moveaxis(np.tensordot(wd[:, :, ki, kj], g, axes=([0], [1])), 0, 1)
        gx = gxp[:, :, padding: padding + h, padding: padding + w]
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _node(out, (x, weight, bias), vjp)


# -- normalization ------------------------------------------------------------------


class BatchNorm(Module):
    """Single-process batch normalization over (N, H, W) per channel.
    Training mode normalizes by batch statistics and updates running stats:
    running <- (1 - momentum) * running + momentum * batch."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=F64):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self, self.training)


def batchnorm(x: Tensor, p: BatchNorm, training: bool) -> Tensor:
    n, c, h, w = x.shape
    if c != p.scale.size:
        raise ShapeError(f"batchnorm channel mismatch: {c} vs {p.scale.size}")
    xd = x.data
    scale, shift = p.scale.data, p.shift.data
    eps = np.asarray(p.eps, dtype=x.dtype)

    if training:
        m = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # population
        p.running_mean.data = ((1 - p.momentum) * p.running_mean.data + p.momentum * m).astype(x.dtype)
        p.running_var.data = ((1 - p.momentum) * p.running_var.data + p.momentum * var).astype(x.dtype)
    else:
        m = p.running_mean.data
        var = p.running_var.data

    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - m[None, :, None, None]) * ivstd[None, :, None, None]
    out = scale[None, :, None, None] * xhat + shift[None, :, None, None]
    count = n * h * w

    def vjp(g):
        gshift = g.sum(axis=(0, 2, 3))
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * scale[None, :, None, None]
        if not training:
            gx = gxhat * ivstd[None, :, None, None]
            return gx, gscale, gshift
        centered = xd - m[None, :, None, None]
        gvar = (gxhat * centered).sum(axis=(0, 2, 3)) * (-0.5) * ivstd ** 3
        gmean = (-(gxhat.sum(axis=(0, 2, 3))) * ivstd
                 + gvar * (-2.0 / count) * centered.sum(axis=(0, 2, 3)))
        gx = (gxhat * ivstd[None, :, None, None]
              + (2.0 / count) * centered * gvar[None, :, None, None]
              + gmean[None, :, None, None] / count)
        return gx, gscale, gshift

    return _node(out, (x, p.scale, p.shift), vjp)


# -- pooling and resampling ------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) spatial mean."""
    return reduce("mean", reduce("mean", x, 3, keepdims=True), 2, keepdims=True)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; extents must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool {k} needs divisible extents, got {h}x{w}")
    r = reshape(x, (n, c, h // k, k, w // k, k))
    return reduce("mean", reduce("mean", r, 5), 3)


def adaptive_avg_pool(x: Tensor, grid: int) -> Tensor:
    """Mean-pool onto a grid x grid output; cell (i, j) covers rows
    [floor(iH/g), ceil((i+1)H/g)) and likewise for columns."""
    n, c, h, w = x.shape
    if h < grid or w < grid:
        raise ShapeError(f"adaptive pool grid {grid} exceeds extents {h}x{w}")
    bounds_h = [(math.floor(i * h / grid), math.ceil((i + 1) * h / grid)) for i in range(grid)]
    bounds_w = [(math.floor(j * w / grid), math.ceil((j + 1) * w / grid)) for j in range(grid)]
    out = np.empty((n, c, grid, grid), dtype=x.dtype)
    for i, (h0, h1) in enumerate(bounds_h):
        for j, (w0, w1) in enumerate(bounds_w):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(bounds_h):
            for j, (w0, w1) in enumerate(bounds_w):
                area = (h1 - h0) * (w1 - w0)
                gx[:, :, h0:h1, w0:w1] += g[:, :, i: i + 1, j: j + 1] / area
        return (gx,)

    return _node(out, (x,), vjp)


def interp_matrix(n_in: int, n_out: int, dtype=F64) -> np.ndarray:
    """Dense 1-D bilinear resampling operator (align-corners = false):
    output center o samples source coordinate (o + 0.5) * n_in/n_out - 0.5,
    clamped at the borders."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        lo = math.floor(src)
        frac = src - lo
        i0 = min(max(lo, 0), n_in - 1)
        i1 = min(max(lo + 1, 0), n_in - 1)
        a[o, i0] += 1.0 - frac
        a[o, i1] += frac
    return a


def resample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """(N, C, H, W) -> (N, C, out_h, out_w) separable bilinear resampling."""
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("target extents must be positive")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return reshape(x, x.shape)  # identity, still recorded
    ay = interp_matrix(h, out_h, x.dtype)
    ax = interp_matrix(w, out_w, x.dtype)
    t1 = np.tensordot(x.data, ax, axes=([3], [1]))          # (N,C,H,Wo)
    out = np.moveaxis(np.tensordot(t1, ay, axes=([2], [1])), 3, 2)  # (N,C,Ho,Wo)

    def vjp(g):
        u1 = np.tensordot(g, ay, axes=([2], [0]))           # (N,C,Wo,H)
        gx = np.tensordot(u1, ax, axes=([2], [0]))          # (N,C,H,W)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), vjp)


def resample_bilinear_nd(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """ndarray version of resample_bilinear for data-side code."""
    h, w = arr.shape[-2:]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    ay = interp_matrix(h, out_h, arr.dtype)
    ax = interp_matrix(w, out_w, arr.dtype)
    t1 = np.tensordot(arr, ax, axes=([arr.ndim - 1], [1]))
    return np.ascontiguousarray(np.moveaxis(np.tensordot(t1, ay, axes=([arr.ndim - 2], [1])), -1, -2))


def resize_nearest_nd(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize for label maps (samples output centers)."""
    h, w = arr.shape[-2:]
    ys = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return arr[..., ys[:, None], xs[None, :]]


# -- loss ----------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255,
                  keep_mask: np.ndarray | None = None) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].
    ``keep_mask`` (same shape as labels) further restricts the mean, which is
    how hard-example mining plugs in. All pixels ignored -> exact 0."""
    n, k, h, w = logits.shape
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        lab = lab.astype(np.int64)
    if lab.shape != (n, h, w):
        raise ShapeError(f"labels {lab.shape} do not match logits {logits.shape}")
    valid = lab != ignore_index
    if keep_mask is not None:
        valid = valid & keep_mask
    lab_checked = lab[valid]
    if lab_checked.size and (lab_checked.min() < 0 or lab_checked.max() >= k):
        raise ValueError(f"label out of range [0, {k})")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz                                    # (N,K,H,W)
    safe = np.where(valid, lab, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
    count = int(valid.sum())
    loss = -(picked[valid].sum() / count) if count else 0.0

    def vjp(g):
        if count == 0:
            return (np.zeros_like(x),)
        p = np.exp(logp)
        p[np.arange(n)[:, None, None], safe, np.arange(h)[None, :, None], np.arange(w)[None, None, :]] -= 1.0
        p *= valid[:, None, :, :]
        return (g * p / count,)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), vjp)
