"""Gradient-check suites run by the CLI and the acceptance tests. All three
suites use float64; thresholds are 1e-6 for primitive ops, 1e-5 for the
weighting module, 1e-4 for the end-to-end micro network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm,
    Conv2d,
    Linear,
    adaptive_avg_pool,
    cross_entropy,
    global_avg_pool,
    init_params,
    linear_1x1,
    resample_bilinear,
)
from .network import NetworkConfig, build_network, total_loss
from .tensor import F64, Tensor, gradcheck, rng_for
from .weighting import ChannelWeighting, forward as weighting_forward

OPS_THRESHOLD = 1e-6
WEIGHTING_THRESHOLD = 1e-5
NETWORK_THRESHOLD = 1e-4


def _ssum(t: Tensor) -> Tensor:
    """Weighted sum to a scalar so every element matters asymmetrically."""
    flat = T.reshape(t, (t.size,))
    w = Tensor(np.linspace(0.3, 1.7, t.size))
    return T.reduce("sum", T.multiply(flat, w), 0)


def ops_suite():
    """(name, error, threshold) for every differentiable primitive."""
    rng = rng_for(20240501, "ops-suite")
    results = []

    def check(name, f, x, step=1e-4):
        results.append((name, gradcheck(f, x, step), OPS_THRESHOLD))

    a = Tensor(rng.normal(0, 1, (3, 4)))
    b34 = rng.normal(0, 1, (3, 4))
    b14 = rng.normal(0, 1, (1, 4))
    check("add", lambda x: _ssum(T.add(x, Tensor(b34))), a)
    check("add_broadcast", lambda x: _ssum(T.add(x, Tensor(b14))), a)
    check("subtract", lambda x: _ssum(T.subtract(Tensor(b34), x)), a)
    check("multiply", lambda x: _ssum(T.multiply(x, Tensor(b14))), a)
    den = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    check("divide_num", lambda x: _ssum(T.divide(x, den)), a)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    check("divide_den", lambda x: _ssum(T.divide(pos, x)), Tensor(rng.uniform(0.7, 1.8, (3, 4))))
    check("square", lambda x: _ssum(T.square(x)), a)
    off_zero = Tensor(np.where(np.abs(b34) < 0.2, 0.5, b34))  # keep away from the kink
    check("relu", lambda x: _ssum(T.relu(x)), off_zero)
    check("tanh", lambda x: _ssum(T.tanh(x)), a)
    check("exp", lambda x: _ssum(T.exp(x)), a)
    check("sigmoid", lambda x: _ssum(T.sigmoid(x)), a)

    m1 = Tensor(rng.normal(0, 1, (3, 5)))
    m2 = Tensor(rng.normal(0, 1, (5, 2)))
    check("matmul", lambda x: _ssum(T.matmul(x, m2)), m1)
    check("matmul_rhs", lambda x: _ssum(T.matmul(m1, x)), m2)
    bm = Tensor(rng.normal(0, 1, (2, 3, 4)))
    bm2 = Tensor(rng.normal(0, 1, (2, 4, 2)))
    check("matmul_batched", lambda x: _ssum(T.matmul(x, bm2)), bm)

    r = Tensor(rng.normal(0, 1, (3, 4, 2)))
    check("reduce_sum", lambda x: _ssum(T.reduce("sum", x, 1)), r)
    check("reduce_mean", lambda x: _ssum(T.reduce("mean", x, 2)), r)
    check("reduce_max", lambda x: _ssum(T.reduce("max", x, 1)), r)
    check("reduce_variance", lambda x: _ssum(T.reduce("variance", x, 1)), r)
    check("softmax", lambda x: _ssum(T.softmax(x, 1)), r)
    check("reshape_transpose", lambda x: _ssum(T.transpose(T.reshape(x, (4, 6)), (1, 0))), r)
    c2 = Tensor(rng.normal(0, 1, (3, 4, 3)))
    check("concat", lambda x: _ssum(T.concat([x, c2], 2)), r)

    lin = Linear(3, 4, F64)
    init_params(lin, 7)
    x4 = Tensor(rng.normal(0, 1, (1, 3, 4, 4)))
    check("linear_1x1", lambda x: _ssum(linear_1x1(x, lin)), x4)
    check("linear_weight", lambda w: _ssum(linear_1x1(x4, lin)), lin.weight)

    conv = Conv2d(3, 2, 3, stride=2, dilation=2, dtype=F64)
    init_params(conv, 8)
    x6 = Tensor(rng.normal(0, 1, (2, 3, 6, 6)))
    check("conv2d", lambda x: _ssum(conv(x)), x6)
    check("conv2d_weight", lambda w: _ssum(conv(x6)), conv.weight)
    check("conv2d_bias", lambda w: _ssum(conv(x6)), conv.bias)

    bn = BatchNorm(3, dtype=F64)
    init_params(bn, 9)
    bn.scale.data = rng.uniform(0.5, 1.5, 3)
    bn.shift.data = rng.normal(0, 0.3, 3)
    check("batchnorm", lambda x: _ssum(bn(x)), x6, step=1e-5)
    check("batchnorm_scale", lambda s: _ssum(bn(x6)), bn.scale, step=1e-5)
    check("batchnorm_shift", lambda s: _ssum(bn(x6)), bn.shift, step=1e-5)

    check("global_avg_pool", lambda x: _ssum(global_avg_pool(x)), x6)
    check("adaptive_avg_pool", lambda x: _ssum(adaptive_avg_pool(x, 3)), x6)
    check("resample_up", lambda x: _ssum(resample_bilinear(x, 9, 7)), x6)
    check("resample_down", lambda x: _ssum(resample_bilinear(x, 4, 3)), x6)

    logits = Tensor(rng.normal(0, 2, (2, 4, 3, 3)))
    labels = rng.integers(0, 4, (2, 3, 3))
    labels[0, 0, 0] = 255
    check("cross_entropy", lambda x: cross_entropy(x, labels), logits)
    return results


def weighting_suite():
    """Naive and fused module gradients vs finite differences, all norm
    kinds, probed at the input and every parameter."""
    results = []
    rng = rng_for(20240502, "weighting-suite")
    f0 = rng.normal(0, 1, (1, 3, 6, 6))
    for kind in ("dbs", "softmax", "tanh"):
        mod = ChannelWeighting(3, hidden=4, norm=kind, ratio=2, impl="naive", dtype=F64)
        for _, p in mod.named_parameters():
            p.data = rng.normal(0, 0.6, p.shape)
        for impl in ("naive", "fused"):
            def run(t):
                return _ssum(weighting_forward(t, mod, impl))

            x = Tensor(f0.copy())
            results.append((f"{kind}/{impl}/input", gradcheck(run, x), WEIGHTING_THRESHOLD))
            for pname, p in mod.named_parameters():
                err = gradcheck(lambda w: _ssum(weighting_forward(Tensor(f0), mod, impl)), p)
                results.append((f"{kind}/{impl}/{pname}", err, WEIGHTING_THRESHOLD))
    return results


def network_suite(max_elements: int = 12):
    """End-to-end loss gradient on a micro network (normalization disabled),
    probing a deterministic subsample of each parameter."""
    cfg = NetworkConfig(class_count=3, backbone_widths=(4, 4, 8, 8),
                        reduced_channels=8, head="none", context="dgcw",
                        norm="none", dgcw_ratio=2, dgcw_impl="naive")
    net = build_network(cfg, seed=5, dtype=F64)
    rng = rng_for(20240503, "network-suite")
    # re-randomize the zero-started layer so all upstream paths carry gradient
    g2 = net.context.g2
    g2.weight.data = rng.normal(0, 0.4, g2.weight.shape)
    g2.bias.data = rng.normal(0, 0.1, g2.bias.shape)
    image = Tensor(rng.normal(0, 1, (1, 3, 16, 16)))
    labels = rng.integers(0, 3, (1, 16, 16))

    def loss_fn(_):
        out = net(image)
        loss, _, _ = total_loss(out, labels, cfg.aux_weight)
        return loss

    results = []
    results.append(("input", gradcheck(lambda x: total_loss(net(x), labels, cfg.aux_weight)[0],
                                       image, max_elements=max_elements), NETWORK_THRESHOLD))
    for name, p in net.named_parameters():
        err = gradcheck(loss_fn, p, max_elements=max_elements)
        results.append((name, err, NETWORK_THRESHOLD))
    return results


SUITES = {"ops": ops_suite, "dgcw": weighting_suite, "net": network_suite}
