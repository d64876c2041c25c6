"""Comparison context modules (plain conv, global pooling, channel gating,
non-local attention) plus the generalized context-operator skeleton that
both the weighting module and self-attention instantiate."""

from __future__ import annotations

import numpy as np

from .layers import Linear, Module, global_avg_pool, linear_1x1, resample_bilinear
from .tensor import (
    F32,
    Tensor,
    add,
    matmul,
    multiply,
    reduce,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)
from .weighting import (
    ChannelWeighting,
    channel_distance,
    downsample,
    flatten_pixels,
    normalize_weights,
    relationship,
)


class ConvContext(Module):
    """The weighting pipeline with the channel-weighting step removed: the
    value projection is fed straight into the two-layer map, so each pixel's
    update ignores every other pixel."""

    def __init__(self, channels, hidden=None, ratio=4, dtype=F32):
        hidden = hidden or channels
        self.wv = Linear(channels, channels, dtype)
        self.g1 = Linear(channels, hidden, dtype)
        self.g2 = Linear(hidden, channels, dtype)
        self.ratio = ratio
        self.zero_start = True

    def reset_start_state(self):
        if self.zero_start:
            self.g2.weight.data = np.zeros_like(self.g2.weight.data)
            self.g2.bias.data = np.zeros_like(self.g2.bias.data)

    def forward(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        d = flatten_pixels(downsample(f, self.ratio))        # (N,P,C)
        p = d.shape[1]
        flat = reshape(d, (n * p, c))
        u = self.g2(relu(self.g1(self.wv(flat))))
        s = multiply(reshape(u, (n, p, c)), float(p))        # sum over j of a j-free map
        hd = h // self.ratio if h % self.ratio == 0 else max(1, round(h / self.ratio))
        wd = w // self.ratio if w % self.ratio == 0 else max(1, round(w / self.ratio))
        sm = reshape(transpose(s, (0, 2, 1)), (n, c, hd, wd))
        return add(f, resample_bilinear(sm, h, w))


class GapContext(Module):
    """Image-level global average pooling, a 1x1 convolution, bilinear
    upsampling back to the input size, fused by a residual add."""

    def __init__(self, channels, dtype=F32):
        self.conv = Linear(channels, channels, dtype)

    def forward(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        pooled = global_avg_pool(f)                          # (N,C,1,1)
        mixed = linear_1x1(pooled, self.conv)
        return add(f, resample_bilinear(mixed, h, w))


class SeContext(Module):
    """Squeeze-and-excitation gate: pooled features through two fully
    connected layers and a sigmoid give per-channel weights that multiply
    the raw input (the product is the output, no residual)."""

    def __init__(self, channels, dtype=F32):
        hidden = max(channels // 4, 1)
        self.fc1 = Linear(channels, hidden, dtype)
        self.fc2 = Linear(hidden, channels, dtype)

    def forward(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        pooled = reshape(global_avg_pool(f), (n, c))
        gate = sigmoid(self.fc2(relu(self.fc1(pooled))))
        return multiply(f, reshape(gate, (n, c, 1, 1)))


class NonLocalContext(Module):
    """Self-attention over pixels: softmax similarity weights mix all value
    vectors, with a channel bottleneck of C/2 on the three projections and a
    final expansion back to C. ``ratio`` 1 holds the input size, 4 wraps the
    block in the same downsample/upsample pair the weighting module uses."""

    def __init__(self, channels, ratio=1, dtype=F32):
        inner = max(channels // 2, 1)
        self.w1 = Linear(channels, inner, dtype)
        self.w2 = Linear(channels, inner, dtype)
        self.w3 = Linear(channels, inner, dtype)
        self.h = Linear(inner, channels, dtype)
        self.ratio = ratio

    def attention(self, x: Tensor) -> Tensor:
        """Row-stochastic (N, P, P) similarity of a flattened (N, P, C) map."""
        n, p, c = x.shape
        flat = reshape(x, (n * p, c))
        q = reshape(self.w1(flat), (n, p, self.w1.out_channels))
        k = reshape(self.w2(flat), (n, p, self.w2.out_channels))
        return softmax(matmul(q, transpose(k, (0, 2, 1))), 2)

    def forward(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        x = flatten_pixels(downsample(f, self.ratio))        # (N,P,C)
        p = x.shape[1]
        attn = self.attention(x)
        v = reshape(self.w3(reshape(x, (n * p, c))), (n, p, self.w3.out_channels))
        mixed = matmul(attn, v)                              # (N,P,C/2)
        out = reshape(self.h(reshape(mixed, (n * p, self.w3.out_channels))), (n, p, c))
        hd = h // self.ratio if h % self.ratio == 0 else max(1, round(h / self.ratio))
        wd = w // self.ratio if w % self.ratio == 0 else max(1, round(w / self.ratio))
        sm = reshape(transpose(out, (0, 2, 1)), (n, c, hd, wd))
        return add(f, resample_bilinear(sm, h, w))


class ContextOperator:
    """Residual context skeleton: out = F + post(h(g(f(w1 X, w2 X), w3 X)))
    where X is the (optionally downsampled) flattened input. ``f`` combines
    the two projected maps into a pairwise object, ``g`` combines it with
    the value map into per-pixel vectors (N, P, C'), ``h`` maps back to C."""

    def __init__(self, w1, w2, w3, f, g, h, ratio=1):
        self.w1, self.w2, self.w3 = w1, w2, w3
        self.f, self.g, self.h = f, g, h
        self.ratio = ratio

    def __call__(self, feat: Tensor) -> Tensor:
        n, c, hh, ww = feat.shape
        x = flatten_pixels(downsample(feat, self.ratio))
        p = x.shape[1]
        flat = reshape(x, (n * p, c))

        def project(lin):
            return reshape(lin(flat), (n, p, lin.out_channels))

        a = self.f(project(self.w1), project(self.w2))
        u = self.g(a, project(self.w3))                      # (N,P,C')
        y = self.h(u)                                        # (N,P,C)
        hd = hh // self.ratio if hh % self.ratio == 0 else max(1, round(hh / self.ratio))
        wd = ww // self.ratio if ww % self.ratio == 0 else max(1, round(ww / self.ratio))
        sm = reshape(transpose(y, (0, 2, 1)), (n, c, hd, wd))
        return add(feat, resample_bilinear(sm, hh, ww))


def weighting_operator(p: ChannelWeighting) -> ContextOperator:
    """Instantiate the skeleton with the weighting module's pieces: f is the
    pairwise squared-distance map followed by the normalization, g is the
    per-pair channel product plus relation map summed over partners, h is
    the identity."""

    def f(q, k):
        return normalize_weights(channel_distance(q, k), p.norm, p.epsilon)

    def g(w, v):
        r = relationship(w, v, p)                            # (N,C,P,P)
        return transpose(reduce("sum", r, 3), (0, 2, 1))     # (N,P,C)

    return ContextOperator(p.wq, p.wk, p.wv, f, g, lambda u: u, ratio=p.ratio)


def nonlocal_operator(p: NonLocalContext) -> ContextOperator:
    """Instantiate the skeleton as self-attention: f is matrix multiplication
    followed by a softmax over the key axis, g is another matrix
    multiplication, h the output projection."""

    def f(q, k):
        return softmax(matmul(q, transpose(k, (0, 2, 1))), 2)

    def g(attn, v):
        return matmul(attn, v)

    def h(u):
        n, pp, ci = u.shape
        return reshape(p.h(reshape(u, (n * pp, ci))), (n, pp, p.h.out_channels))

    return ContextOperator(p.w1, p.w2, p.w3, f, g, h, ratio=p.ratio)
