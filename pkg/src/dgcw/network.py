"""Full segmentation network: small residual backbone at stride 8 (dilated
last two stages), optional pyramid-pooling or parallel-dilation head,
channel reduction, a pluggable context module, main classifier, and an
auxiliary head on the third backbone stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import ConvContext, GapContext, NonLocalContext, SeContext
from .layers import (
    BatchNorm,
    Conv2d,
    Module,
    adaptive_avg_pool,
    cross_entropy,
    global_avg_pool,
    init_params,
    linear_1x1,
    Linear,
    resample_bilinear,
)
from .tensor import F32, Tensor, add, concat, multiply, relu
from .weighting import ChannelWeighting

HEADS = ("none", "ppm", "aspp")
CONTEXTS = ("none", "conv", "gap", "se", "nlh", "nld", "dgcw")
PPM_GRIDS = (1, 2, 3, 6)


@dataclass
class NetworkConfig:
    class_count: int = 4
    backbone_widths: tuple = (16, 32, 64, 64)
    reduced_channels: int = 32
    head: str = "none"
    context: str = "none"
    aux_weight: float = 0.4
    aspp_rates: tuple = (2, 4, 6)
    aspp_out_channels: int = 64
    norm: str = "batch"          # batch | none (gradient checking)
    dgcw_norm: str = "dbs"
    dgcw_ratio: int = 4
    dgcw_hidden: int = 0         # 0 -> same as reduced_channels
    dgcw_eps: float = 0.0        # 0 -> per-dtype default
    dgcw_impl: str = "fused"
    dgcw_block: int = 16

    def validate(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.reduced_channels < 4:
            raise ValueError("reduced_channels must be at least 4")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.context not in CONTEXTS:
            raise ValueError(f"context must be one of {CONTEXTS}")
        if len(self.backbone_widths) != 4:
            raise ValueError("backbone_widths needs four stage widths")
        return self


@dataclass
class ForwardOutput:
    main_logits: Tensor          # (N, K, H, W), input resolution
    aux_logits: Tensor           # (N, K, H, W)
    features: Tensor             # pre-classifier context output, stride 8


class ConvBnRelu(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, dilation=1, use_bn=True, dtype=F32):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, dilation, dtype=dtype)
        self.bn = BatchNorm(out_ch, dtype=dtype) if use_bn else None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return relu(x)


class ResidualBlock(Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1, use_bn=True, dtype=F32):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, dilation, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, dtype=dtype) if use_bn else None
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, dilation, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype) if use_bn else None
        if in_ch != out_ch or stride != 1:
            self.skip = Conv2d(in_ch, out_ch, 1, stride, padding=0, dtype=dtype)
            self.skip_bn = BatchNorm(out_ch, dtype=dtype) if use_bn else None
        else:
            self.skip = None
            self.skip_bn = None

    def forward(self, x):
        y = self.conv1(x)
        if self.bn1 is not None:
            y = self.bn1(y)
        y = relu(y)
        y = self.conv2(y)
        if self.bn2 is not None:
            y = self.bn2(y)
        if self.skip is not None:
            x = self.skip(x)
            if self.skip_bn is not None:
                x = self.skip_bn(x)
        return relu(add(y, x))


class Backbone(Module):
    """Stem at stride 2, two more stride-2 stages (overall stride 8), then
    two stride-1 stages dilated by 2 and 4. The third stage's output feeds
    the auxiliary head."""

    def __init__(self, widths, use_bn=True, dtype=F32):
        w1, w2, w3, w4 = widths
        self.stem = ConvBnRelu(3, w1, 3, stride=2, use_bn=use_bn, dtype=dtype)
        self.stage1 = ResidualBlock(w1, w1, stride=2, use_bn=use_bn, dtype=dtype)
        self.stage2 = ResidualBlock(w1, w2, stride=2, use_bn=use_bn, dtype=dtype)
        self.stage3 = ResidualBlock(w2, w3, stride=1, dilation=2, use_bn=use_bn, dtype=dtype)
        self.stage4 = ResidualBlock(w3, w4, stride=1, dilation=4, use_bn=use_bn, dtype=dtype)

    def forward(self, image: Tensor):
        n, c, h, w = image.shape
        if h % 8 or w % 8:
            raise ValueError(f"input extents must divide by 8, got {h}x{w}")
        x = self.stem(image)
        x = self.stage1(x)
        x = self.stage2(x)
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        return c3, c4


class PpmHead(Module):
    """Grid pooling at 1/2/3/6, per-branch 1x1 conv to C/4, upsample, and
    channel concatenation with the input (output channels = 2C)."""

    def __init__(self, channels, use_bn=True, dtype=F32):
        branch = max(channels // 4, 1)
        self.branches = [ConvBnRelu(channels, branch, 1, use_bn=use_bn, dtype=dtype)
                         for _ in PPM_GRIDS]
        self.out_channels = channels + len(PPM_GRIDS) * branch

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h < max(PPM_GRIDS) or w < max(PPM_GRIDS):
            raise ValueError(f"spatial extents {h}x{w} below the largest pooling grid")
        outs = [x]
        for grid, conv in zip(PPM_GRIDS, self.branches):
            pooled = adaptive_avg_pool(x, grid)
            outs.append(resample_bilinear(conv(pooled), h, w))
        return concat(outs, 1)


class AsppHead(Module):
    """Five parallel branches (global pooling, 1x1 conv, three dilated 3x3
    convs) concatenated and fused by a 1x1 conv."""

    def __init__(self, channels, out_channels, rates, use_bn=True, dtype=F32):
        self.conv1 = ConvBnRelu(channels, out_channels, 1, use_bn=use_bn, dtype=dtype)
        self.dilated = [ConvBnRelu(channels, out_channels, 3, dilation=r, use_bn=use_bn, dtype=dtype)
                        for r in rates]
        self.pool_conv = ConvBnRelu(channels, out_channels, 1, use_bn=use_bn, dtype=dtype)
        self.fuse = ConvBnRelu(out_channels * (2 + len(rates)), out_channels, 1,
                               use_bn=use_bn, dtype=dtype)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        outs = [self.conv1(x)]
        outs += [conv(x) for conv in self.dilated]
        pooled = self.pool_conv(global_avg_pool(x))
        outs.append(resample_bilinear(pooled, h, w))
        return self.fuse(concat(outs, 1))


def _make_context(cfg: NetworkConfig, dtype):
    c = cfg.reduced_channels
    hidden = cfg.dgcw_hidden or c
    eps = cfg.dgcw_eps or None
    if cfg.context == "none":
        return None
    if cfg.context == "conv":
        return ConvContext(c, hidden, cfg.dgcw_ratio, dtype=dtype)
    if cfg.context == "gap":
        return GapContext(c, dtype=dtype)
    if cfg.context == "se":
        return SeContext(c, dtype=dtype)
    if cfg.context == "nlh":
        return NonLocalContext(c, ratio=1, dtype=dtype)
    if cfg.context == "nld":
        return NonLocalContext(c, ratio=cfg.dgcw_ratio, dtype=dtype)
    return ChannelWeighting(c, hidden, cfg.dgcw_norm, cfg.dgcw_ratio,
                            eps, cfg.dgcw_impl, cfg.dgcw_block, dtype=dtype)


class SegNet(Module):
    def __init__(self, cfg: NetworkConfig, dtype=F32):
        cfg.validate()
        use_bn = cfg.norm == "batch"
        widths = cfg.backbone_widths
        self.backbone = Backbone(widths, use_bn, dtype)
        if cfg.head == "ppm":
            self.head = PpmHead(widths[3], use_bn, dtype)
            head_out = self.head.out_channels
        elif cfg.head == "aspp":
            self.head = AsppHead(widths[3], cfg.aspp_out_channels, cfg.aspp_rates, use_bn, dtype)
            head_out = self.head.out_channels
        else:
            self.head = None
            head_out = widths[3]
        self.reduce = ConvBnRelu(head_out, cfg.reduced_channels, 3, use_bn=use_bn, dtype=dtype)
        self.context = _make_context(cfg, dtype)
        self.classifier = Linear(cfg.reduced_channels, cfg.class_count, dtype)
        self.aux_conv = ConvBnRelu(widths[2], cfg.reduced_channels, 3, use_bn=use_bn, dtype=dtype)
        self.aux_classifier = Linear(cfg.reduced_channels, cfg.class_count, dtype)
        self.config = cfg

    def forward(self, image: Tensor) -> ForwardOutput:
        n, _, h, w = image.shape
        c3, c4 = self.backbone(image)
        x = self.head(c4) if self.head is not None else c4
        feat = self.reduce(x)
        if self.context is not None:
            feat = self.context(feat)
        logits = resample_bilinear(linear_1x1(feat, self.classifier), h, w)
        aux = resample_bilinear(linear_1x1(self.aux_conv(c3), self.aux_classifier), h, w)
        return ForwardOutput(main_logits=logits, aux_logits=aux, features=feat)


def build_network(cfg: NetworkConfig, seed: int, dtype=F32) -> SegNet:
    """Construct, initialize (keyed per parameter path), and apply start
    states (the context modules' zero-initialized second relation layer)."""
    net = SegNet(cfg, dtype)
    init_params(net, seed)
    ctx = net.context
    if ctx is not None and hasattr(ctx, "reset_start_state"):
        ctx.reset_start_state()
    return net


def total_loss(out: ForwardOutput, labels: np.ndarray, aux_weight: float,
               ignore_index: int = 255, keep_mask: np.ndarray | None = None):
    """Main cross-entropy (optionally restricted to a kept-pixel mask, the
    hard-example hook) plus ``aux_weight`` times the auxiliary loss.
    Returns (loss, main value, aux value)."""
    main = cross_entropy(out.main_logits, labels, ignore_index, keep_mask)
    aux = cross_entropy(out.aux_logits, labels, ignore_index)
    loss = add(main, multiply(aux, float(aux_weight)))
    return loss, main.item(), aux.item()
