"""Distance-guided channel weighting.

For each pair of (downsampled) pixels (i, j), the channels of pixel i's
value vector are reweighted by the normalized per-channel squared distance
between the pair's query/key projections; a two-layer map turns each
weighted vector into a relation vector, relations are summed over j,
upsampled, and added back to the input.

Two interchangeable implementations:

* NAIVE materializes the full (C, P, P) distance / weight / relation maps
  out of ordinary autodiff ops — slow, memory-hungry, and the oracle.
* FUSED streams over blocks of j and never materializes any (C, P, P)
  tensor; peak extra memory is O(C * P * B) for block width B. Its backward
  rule recomputes each block, so training holds the same bound.
"""

from __future__ import annotations

import numpy as np

from .layers import Linear, Module, avg_pool, resample_bilinear
from .tensor import (
    F32,
    Tensor,
    _node,
    add,
    divide,
    multiply,
    reduce,
    relu,
    reshape,
    softmax,
    square,
    subtract,
    tanh,
    transpose,
)

NORM_KINDS = ("dbs", "softmax", "tanh")
IMPLS = ("naive", "fused")


def default_epsilon(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == F32 else 1e-12


class ChannelWeighting(Module):
    """The module's learnable state: query/key/value projections plus the
    two-layer relation map (first layer followed by a ReLU). The second
    layer starts at zero by default so a fresh module is an exact identity."""

    def __init__(self, channels, hidden=None, norm="dbs", ratio=4,
                 epsilon=None, impl="fused", block=16, dtype=F32):
        if norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {norm!r}")
        if impl not in IMPLS:
            raise ValueError(f"impl must be one of {IMPLS}, got {impl!r}")
        hidden = hidden or channels
        self.wq = Linear(channels, channels, dtype)
        self.wk = Linear(channels, channels, dtype)
        self.wv = Linear(channels, channels, dtype)
        self.g1 = Linear(channels, hidden, dtype)
        self.g2 = Linear(hidden, channels, dtype)
        self.norm = norm
        self.ratio = ratio
        self.epsilon = default_epsilon(dtype) if epsilon is None else epsilon
        self.impl = impl
        self.block = block
        self.zero_start = True

    def reset_start_state(self):
        if self.zero_start:
            self.g2.weight.data = np.zeros_like(self.g2.weight.data)
            self.g2.bias.data = np.zeros_like(self.g2.bias.data)

    def forward(self, f: Tensor) -> Tensor:
        return forward(f, self, self.impl)


def downsample(f: Tensor, ratio: int) -> Tensor:
    """Mean-pool by the ratio when it divides the extents, otherwise
    bilinear-resample to the rounded size."""
    n, c, h, w = f.shape
    if h < ratio or w < ratio:
        raise ValueError(f"spatial extents {h}x{w} smaller than ratio {ratio}")
    if ratio == 1:
        return f
    if h % ratio == 0 and w % ratio == 0:
        return avg_pool(f, ratio)
    return resample_bilinear(f, max(1, round(h / ratio)), max(1, round(w / ratio)))


def flatten_pixels(d: Tensor) -> Tensor:
    """(N, C, h, w) -> (N, P, C) pixel rows."""
    n, c, h, w = d.shape
    return reshape(transpose(d, (0, 2, 3, 1)), (n, h * w, c))


def qkv_project(d: Tensor, p: ChannelWeighting):
    """Three independent projections of the flattened map: (N, P, C) each."""
    n, pp, c = d.shape
    flat = reshape(d, (n * pp, c))
    out = []
    for lin in (p.wq, p.wk, p.wv):
        out.append(reshape(lin(flat), (n, pp, c)))
    return tuple(out)


def channel_distance(q: Tensor, k: Tensor) -> Tensor:
    """Squared per-channel differences for all pixel pairs:
    (N, P, C) x (N, P, C) -> (N, C, P, P) with entry [c, i, j] =
    (Q[i, c] - K[j, c])^2."""
    n, p, c = q.shape
    qt = transpose(q, (0, 2, 1))
    kt = transpose(k, (0, 2, 1))
    qi = reshape(qt, (n, c, p, 1))
    kj = reshape(kt, (n, c, 1, p))
    return square(subtract(qi, kj))


def normalize_weights(m: Tensor, kind: str, epsilon: float) -> Tensor:
    """Per-pair channel normalization of the distance map (channel axis 1).
    dbs divides each channel by the pair's channel sum (+ epsilon), so a
    pair with identical projections gets exactly-zero weights."""
    if kind == "dbs":
        den = add(reduce("sum", m, 1, keepdims=True), epsilon)
        return divide(m, den)
    if kind == "softmax":
        return softmax(m, 1)
    if kind == "tanh":
        return tanh(m)
    raise ValueError(f"unknown normalization {kind!r}")


def pair_map(t: Tensor, g1: Linear, g2: Linear) -> Tensor:
    """Apply the two-layer relation map along the channel axis of an
    (N, C, P, P) tensor of per-pair vectors."""
    n, c, p, p2 = t.shape
    flat = reshape(transpose(t, (0, 2, 3, 1)), (n * p * p2, c))
    out = g2(relu(g1(flat)))
    return transpose(reshape(out, (n, p, p2, out.shape[1])), (0, 3, 1, 2))


def relationship(w: Tensor, v: Tensor, p: ChannelWeighting) -> Tensor:
    """Per-pair weighting of pixel i's value vector followed by the relation
    map: (N, C, P, P)."""
    n, c, pp, _ = w.shape
    vt = reshape(transpose(v, (0, 2, 1)), (n, c, pp, 1))  # broadcast over j
    return pair_map(multiply(w, vt), p.g1, p.g2)


def aggregate(r: Tensor, f: Tensor, ratio: int) -> Tensor:
    """Sum relations over the partner-pixel axis, upsample back to the input
    grid, and add residually."""
    n, c, h, w = f.shape
    hd, wd = _down_extents(h, w, ratio)
    s = reduce("sum", r, 3)                       # (N, C, P)
    sm = reshape(s, (n, c, hd, wd))
    return add(f, resample_bilinear(sm, h, w))


def _down_extents(h, w, ratio):
    if ratio == 1:
        return h, w
    if h % ratio == 0 and w % ratio == 0:
        return h // ratio, w // ratio
    return max(1, round(h / ratio)), max(1, round(w / ratio))


def forward(f: Tensor, p: ChannelWeighting, impl: str | None = None) -> Tensor:
    """Full module: downsample -> project -> distance -> normalize ->
    relate -> aggregate residually."""
    impl = impl or p.impl
    if impl not in IMPLS:
        raise ValueError(f"impl must be one of {IMPLS}, got {impl!r}")
    d = flatten_pixels(downsample(f, p.ratio))
    q, k, v = qkv_project(d, p)
    if impl == "naive":
        m = channel_distance(q, k)
        w = normalize_weights(m, p.norm, p.epsilon)
        r = relationship(w, v, p)
        return aggregate(r, f, p.ratio)
    s = fused_pair_sum(q, k, v, p)                # (N, P, C)
    n, c, h, wd = f.shape
    hd, wdd = _down_extents(h, wd, p.ratio)
    sm = reshape(transpose(s, (0, 2, 1)), (n, c, hd, wdd))
    return add(f, resample_bilinear(sm, h, wd))


# -- fused kernel -------------------------------------------------------------


class Meter:
    """Tracks the kernel's explicitly managed temporaries (bytes)."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, *arrays):
        for a in arrays:
            self.current += a.nbytes
        self.peak = max(self.peak, self.current)

    def free(self, *arrays):
        for a in arrays:
            self.current -= a.nbytes


def _norm_forward(m: np.ndarray, kind: str, eps: float) -> np.ndarray:
    # distances along the last axis
    if kind == "dbs":
        return m / (m.sum(axis=-1, keepdims=True) + eps)
    if kind == "softmax":
        e = np.exp(m - m.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return np.tanh(m)


def _norm_vjp(gw, m, w, kind, eps):
    if kind == "dbs":
        den = m.sum(axis=-1, keepdims=True) + eps
        return gw / den - (gw * m).sum(axis=-1, keepdims=True) / (den * den)
    if kind == "softmax":
        return w * (gw - (gw * w).sum(axis=-1, keepdims=True))
    return gw * (1.0 - w * w)


def fused_forward(q, k, v, w1, b1, w2, b2, kind, eps, block, meter: Meter | None = None):
    """Streaming forward over blocks of j. Arrays: q, k, v are (N, P, C);
    returns the per-pixel relation sum (N, P, C)."""
    n, p, c = q.shape
    s = np.zeros_like(q)  # output accumulator, not an auxiliary
    for j0 in range(0, p, block):
        kb = k[:, j0: j0 + block, :]
        diff = q[:, :, None, :] - kb[:, None, :, :]          # (N,P,B,C)
        m = diff * diff
        if meter:
            meter.alloc(diff, m)
            meter.free(diff)
        del diff
        w = _norm_forward(m, kind, eps)
        if meter:
            meter.alloc(w)
            meter.free(m)
        del m
        t = w * v[:, :, None, :]
        if meter:
            meter.alloc(t)
            meter.free(w)
        del w
        u = np.maximum(t @ w1.T + b1, 0.0)                   # (N,P,B,Cg)
        if meter:
            meter.alloc(u)
            meter.free(t)
        del t
        r = u @ w2.T + b2                                    # (N,P,B,C)
        if meter:
            meter.alloc(r)
            meter.free(u)
        del u
        s += r.sum(axis=2)
        if meter:
            meter.free(r)
    return s


def fused_backward(gs, q, k, v, w1, b1, w2, b2, kind, eps, block):
    """Recompute each block and push the output gradient through it."""
    n, p, c = q.shape
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gw1 = np.zeros_like(w1)
    gb1 = np.zeros_like(b1)
    gw2 = np.zeros_like(w2)
    gb2 = np.zeros_like(b2)
    gu_base = gs @ w2                                        # (N,P,Cg)
    for j0 in range(0, p, block):
        kb = k[:, j0: j0 + block, :]
        bw = kb.shape[1]
        diff = q[:, :, None, :] - kb[:, None, :, :]
        m = diff * diff
        w = _norm_forward(m, kind, eps)
        t = w * v[:, :, None, :]
        pre = t @ w1.T + b1
        u = np.maximum(pre, 0.0)

        gw2 += np.tensordot(gs, u.sum(axis=2), axes=([0, 1], [0, 1]))
        gb2 += bw * gs.sum(axis=(0, 1))
        gpre = gu_base[:, :, None, :] * (pre > 0)
        gw1 += np.tensordot(gpre, t, axes=([0, 1, 2], [0, 1, 2]))
        gb1 += gpre.sum(axis=(0, 1, 2))
        gt = gpre @ w1                                       # (N,P,B,C)
        gv += (gt * w).sum(axis=2)
        gwt = gt * v[:, :, None, :]
        gm = _norm_vjp(gwt, m, w, kind, eps)
        gdiff = 2.0 * diff * gm
        gq += gdiff.sum(axis=2)
        gk[:, j0: j0 + bw, :] -= gdiff.sum(axis=1)
    return gq, gk, gv, gw1, gb1, gw2, gb2


def fused_pair_sum(q: Tensor, k: Tensor, v: Tensor, p: ChannelWeighting) -> Tensor:
    """Autodiff wrapper around the streaming kernel."""
    arrs = (q.data, k.data, v.data,
            p.g1.weight.data, p.g1.bias.data, p.g2.weight.data, p.g2.bias.data)
    s = fused_forward(*arrs, p.norm, p.epsilon, p.block)

    def vjp(g):
        return fused_backward(g, *arrs, p.norm, p.epsilon, p.block)

    parents = (q, k, v, p.g1.weight, p.g1.bias, p.g2.weight, p.g2.bias)
    return _node(s, parents, vjp)


def naive_forward_arrays(q, k, v, w1, b1, w2, b2, kind, eps, meter: Meter | None = None):
    """Forward-only mirror of the naive route on plain arrays, materializing
    the full pairwise maps (used by the benchmark's memory accounting)."""
    n, p, c = q.shape
    diff = q[:, :, None, :] - k[:, None, :, :]               # (N,P,P,C)
    m = diff * diff
    if meter:
        meter.alloc(diff, m)
        meter.free(diff)
    del diff
    w = _norm_forward(m, kind, eps)
    if meter:
        meter.alloc(w)
        meter.free(m)
    del m
    t = w * v[:, :, None, :]
    if meter:
        meter.alloc(t)
        meter.free(w)
    del w
    u = np.maximum(t @ w1.T + b1, 0.0)
    if meter:
        meter.alloc(u)
        meter.free(t)
    del t
    r = u @ w2.T + b2
    if meter:
        meter.alloc(r)
        meter.free(u)
    del u
    s = r.sum(axis=2)
    if meter:
        meter.free(r)
    return s
