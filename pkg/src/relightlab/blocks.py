"""Architectural building blocks for the relighting networks.

Reference channel plan (scale_divisor = 1, 384x384 input):

    base           96 x  96 x  64   (7x7 conv stride 2, 3x3 max-pool stride 2)
    dense-trans 1  48 x  48 x 128   (dense pairs x6,  1x1 conv + 2x2 avg-pool)
    dense-trans 2  24 x  24 x 256   (dense pairs x12, 1x1 conv + 2x2 avg-pool)
    dense-trans 3  24 x  24 x 512   (dense pairs x24, 1x1 conv, no pool)
    multiscale    384 x 384 x   8   (any-to-any entry features)
    decoder       48^2x128 -> 96^2x64 -> 192^2x32 -> 384^2x16 -> refine -> C

`scale_divisor` shrinks every channel count (floored at 4) so the same
topology trains at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import (Parameter, Tensor, add, concat_channels, linear, mul,
                       relu, reshape, sigmoid)
from .module import Module, he_normal
from .nnops import RunningStats, conv2d, normalize_batch, pixel_reshuffle, pool, resample

__all__ = [
    "BlockConfig",
    "EncoderOutputs",
    "Conv2d",
    "Linear",
    "BatchNorm2d",
    "DenseBlock",
    "TransitionBlock",
    "ResidualBlock",
    "SqueezeExcite",
    "DilatedInception",
    "MultiscaleBlock",
    "RefinementPyramid",
    "DecoderStage",
    "Decoder",
    "Encoder",
    "Bottleneck",
    "REFERENCE_GROWTH",
    "DECODER_LAYERS",
    "REFINE_POOL_SIZES",
    "MULTISCALE_CHANNELS",
]

REFERENCE_BASE = 64
REFERENCE_GROWTH = 32
ENCODER_STAGE_PAIRS = (6, 12, 24)
ENCODER_STAGE_CHANNELS = (128, 256, 512)
BOTTLENECK_CHANNELS = 512
DECODER_STAGE_CHANNELS = (128, 64, 32, 16)
DECODER_LAYERS = 7
REFINE_POOL_SIZES = (32, 16, 8, 4)
REFINE_REDUCTION = 3
MULTISCALE_CHANNELS = 8
MULTISCALE_PAIRS = 2
ATTENTION_KINDS = ("squeeze_excitation", "dilated_inception")


@dataclass(frozen=True)
class BlockConfig:
    """Channel scaling and attention choices shared by all blocks."""

    scale_divisor: int = 1
    growth_pairs: int = 6  # dense pairs inside each bottleneck
    se_reduction: int = 16
    attention_kind: str = "squeeze_excitation"

    def __post_init__(self):
        if self.scale_divisor < 1:
            raise ValueError("scale_divisor must be >= 1")
        if self.growth_pairs < 1:
            raise ValueError("growth_pairs must be >= 1")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")

    def scaled(self, channels: int) -> int:
        """Divide a reference channel count, floored at 4."""
        return max(4, channels // self.scale_divisor)

    @property
    def growth(self) -> int:
        return self.scaled(REFERENCE_GROWTH)


@dataclass
class EncoderOutputs:
    """Skip-connection sources produced by one encoder pass."""

    base: Tensor
    dt1: Tensor
    dt2: Tensor
    dt3: Tensor
    multiscale_feat: Optional[Tensor] = None


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1,
                 pad: int = 0, dilation: int = 1, dtype=np.float32):
        super().__init__()
        self.stride, self.pad, self.dilation = stride, pad, dilation
        self.weight = Parameter("weight", he_normal(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, self.bias.tensor,
                      stride=self.stride, zero_pad=self.pad, dilation=self.dilation)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, dtype=np.float32):
        super().__init__()
        self.weight = Parameter("weight", he_normal(rng, (n_out, n_in), n_in, dtype))
        self.bias = Parameter("bias", np.zeros(n_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.tensor, self.bias.tensor)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter("gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter("beta", np.zeros(channels, dtype=dtype))
        self.stats = RunningStats.create(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return normalize_batch(x, self.gamma.tensor, self.beta.tensor, mode, self.stats)


class DenseBlock(Module):
    """Dense pairs (1x1 conv -> relu -> 3x3 conv), each pair's output
    concatenated onto its input; out_channels = in + pairs * growth."""

    def __init__(self, rng, cin: int, pairs: int, growth: int, dtype=np.float32):
        super().__init__()
        if pairs < 1:
            raise ValueError("dense block needs at least one pair")
        mid = 4 * growth
        layers = []
        c = cin
        for _ in range(pairs):
            layers.append(Conv2d(rng, c, mid, 1, dtype=dtype))
            layers.append(Conv2d(rng, mid, growth, 3, pad=1, dtype=dtype))
            c += growth
        self.layers = layers
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        for i in range(0, len(self.layers), 2):
            y = self.layers[i + 1].forward(relu(self.layers[i].forward(x)))
            x = concat_channels([x, y])
        return x


class TransitionBlock(Module):
    """1x1 conv (halving channels unless overridden) then 2x2 avg-pool."""

    def __init__(self, rng, cin: int, cout: Optional[int] = None,
                 pool: bool = True, dtype=np.float32):
        super().__init__()
        self.pool = pool
        self.out_channels = cin // 2 if cout is None else cout
        self.conv = Conv2d(rng, cin, self.out_channels, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.pool and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ValueError(f"transition pool needs even spatial dims, got {x.shape}")
        y = self.conv.forward(x)
        if self.pool:
            y = pool("avg", y, 2, 2)
        return y


class ResidualBlock(Module):
    """Two stacked units of (3x3 conv, relu, 3x3 conv) + identity, relu after add."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        super().__init__()
        self.convs = [Conv2d(rng, channels, channels, 3, pad=1, dtype=dtype)
                      for _ in range(4)]

    def forward(self, x: Tensor) -> Tensor:
        for u in range(2):
            h = self.convs[2 * u + 1].forward(relu(self.convs[2 * u].forward(x)))
            x = relu(add(x, h))
        return x


class SqueezeExcite(Module):
    """Channel gate: global average pool -> C/R -> relu -> C -> sigmoid."""

    def __init__(self, rng, channels: int, reduction: int, dtype=np.float32):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ValueError(
                f"squeeze-excitation needs channels >= reduction, got C={channels}, R={reduction}"
            )
        self.fc1 = Linear(rng, channels, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, channels, dtype=dtype)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        b, c = x.shape[0], x.shape[1]
        s = reshape(pool("global_avg", x, 1), (b, c))
        gate = sigmoid(self.fc2.forward(relu(self.fc1.forward(s))))
        return mul(x, reshape(gate, (b, c, 1, 1)))


class DilatedInception(Module):
    """Spatial gate from four parallel 3x3 branches at dilation 1/2/4/8.

    Branch outputs (C/4 channels each) are concatenated, squeezed by a
    1x1 conv and a sigmoid, and the gate rescales the input.  The
    `reduction` argument mirrors the squeeze-excitation signature and is
    unused by this structure.
    """

    DILATIONS = (1, 2, 4, 8)

    def __init__(self, rng, channels: int, reduction: int = 16, dtype=np.float32):
        super().__init__()
        if channels % 4:
            raise ValueError(f"dilated inception needs channels divisible by 4, got {channels}")
        self.branches = [Conv2d(rng, channels, channels // 4, 3, pad=d, dilation=d, dtype=dtype)
                         for d in self.DILATIONS]
        self.squeeze = Conv2d(rng, channels, channels, 1, dtype=dtype)
        self.min_extent = 2 * max(self.DILATIONS) + 1

    def forward(self, x: Tensor) -> Tensor:
        if min(x.shape[2], x.shape[3]) < self.min_extent:
            raise ValueError(
                f"dilated inception needs spatial extent >= {self.min_extent}, got {x.shape}"
            )
        feats = concat_channels([b.forward(x) for b in self.branches])
        gate = sigmoid(self.squeeze.forward(feats))
        return mul(x, gate)


def make_attention(rng, kind: str, channels: int, reduction: int, dtype=np.float32) -> Module:
    if kind == "squeeze_excitation":
        return SqueezeExcite(rng, channels, reduction, dtype=dtype)
    if kind == "dilated_inception":
        return DilatedInception(rng, channels, reduction, dtype=dtype)
    raise ValueError(f"unknown attention kind {kind!r}")


class _MultiscaleLevel(Module):
    """Dense block with local 1x1 fusion plus a full-level residual skip."""

    def __init__(self, rng, channels: int, growth: int, dtype=np.float32):
        super().__init__()
        self.dense = DenseBlock(rng, channels, MULTISCALE_PAIRS, growth, dtype=dtype)
        self.fuse = Conv2d(rng, self.dense.out_channels, channels, 1, dtype=dtype)
        self.res = ResidualBlock(rng, channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        d = add(self.fuse.forward(self.dense.forward(x)), x)
        return add(self.res.forward(d), x)


class MultiscaleBlock(Module):
    """Three-level pixel-unshuffle feature pyramid.

    The input is unshuffled to quarter and half resolution, each level is
    processed by a dense+residual unit, lower levels are pixel-shuffled
    up and concatenated into the next, and a final 1x1 conv emits
    MULTISCALE_CHANNELS features at the input resolution.
    """

    def __init__(self, rng, in_channels: int, growth: int, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        c2 = in_channels * 16
        self.level2 = _MultiscaleLevel(rng, c2, growth, dtype=dtype)
        c1 = in_channels * 4 + c2 // 4
        self.level1 = _MultiscaleLevel(rng, c1, growth, dtype=dtype)
        c0 = in_channels + c1 // 4
        self.level0 = _MultiscaleLevel(rng, c0, growth, dtype=dtype)
        self.head = Conv2d(rng, c0, MULTISCALE_CHANNELS, 1, dtype=dtype)
        self.out_channels = MULTISCALE_CHANNELS

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"multiscale block needs H,W divisible by 4, got {x.shape}")
        x2 = pixel_reshuffle("unshuffle", x, 4)
        y2 = self.level2.forward(x2)
        x1 = concat_channels([pixel_reshuffle("unshuffle", x, 2),
                              pixel_reshuffle("shuffle", y2, 2)])
        y1 = self.level1.forward(x1)
        x0 = concat_channels([x, pixel_reshuffle("shuffle", y1, 2)])
        y0 = self.level0.forward(x0)
        return self.head.forward(y0)


class RefinementPyramid(Module):
    """Four avg-pool context branches (one channel each) plus the trunk,
    fused by a 3x3 conv into the decoder output channels."""

    def __init__(self, rng, trunk_channels: int, out_channels: int, dtype=np.float32):
        super().__init__()
        self.branch_convs = [Conv2d(rng, trunk_channels, 1, 1, dtype=dtype)
                             for _ in REFINE_POOL_SIZES]
        self.out_conv = Conv2d(rng, trunk_channels + len(REFINE_POOL_SIZES),
                               out_channels, 3, pad=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % max(REFINE_POOL_SIZES) or w % max(REFINE_POOL_SIZES):
            raise ValueError(
                f"refinement pyramid needs H,W divisible by {max(REFINE_POOL_SIZES)}, got {x.shape}"
            )
        feats = [x]
        for size, conv in zip(REFINE_POOL_SIZES, self.branch_convs):
            y = conv.forward(pool("avg", x, size, size))
            feats.append(resample("nearest_up", y, h, w))
        return self.out_conv.forward(concat_channels(feats))


class DecoderStage(Module):
    """Dense layers (optional attention -> batch norm -> relu -> 3x3 conv,
    concatenated) then a 1x1 transition conv and a x2 nearest upsample,
    followed by a residual block."""

    def __init__(self, rng, cin: int, cout: int, growth: int,
                 attention: Optional[str], reduction: int, dtype=np.float32):
        super().__init__()
        atts, norms, convs = [], [], []
        c = cin
        for _ in range(DECODER_LAYERS):
            if attention is not None:
                atts.append(make_attention(rng, attention, c, reduction, dtype=dtype))
            norms.append(BatchNorm2d(c, dtype=dtype))
            convs.append(Conv2d(rng, c, growth, 3, pad=1, dtype=dtype))
            c += growth
        self.atts, self.norms, self.convs = atts, norms, convs
        self.transition = Conv2d(rng, c, cout, 1, dtype=dtype)
        self.res = ResidualBlock(rng, cout, dtype=dtype)
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        for i in range(DECODER_LAYERS):
            h = self.atts[i].forward(x) if self.atts else x
            h = relu(self.norms[i].forward(h))
            x = concat_channels([x, self.convs[i].forward(h)])
        y = self.transition.forward(x)
        y = resample("nearest_up", y, y.shape[2] * 2, y.shape[3] * 2)
        return self.res.forward(y)


class Encoder(Module):
    """Shared feature extractor: strided 7x7 base conv + max-pool, then
    three dense+transition stages (pairs 6/12/24; stage 3 keeps its
    spatial size)."""

    def __init__(self, rng, cfg: BlockConfig, in_channels: int, dtype=np.float32):
        super().__init__()
        base_c = cfg.scaled(REFERENCE_BASE)
        g = cfg.growth
        self.base_conv = Conv2d(rng, in_channels, base_c, 7, stride=2, pad=3, dtype=dtype)
        self.in_channels = in_channels
        self.dense1 = DenseBlock(rng, base_c, ENCODER_STAGE_PAIRS[0], g, dtype=dtype)
        self.trans1 = TransitionBlock(rng, self.dense1.out_channels,
                                      cfg.scaled(ENCODER_STAGE_CHANNELS[0]), dtype=dtype)
        self.dense2 = DenseBlock(rng, self.trans1.out_channels, ENCODER_STAGE_PAIRS[1], g, dtype=dtype)
        self.trans2 = TransitionBlock(rng, self.dense2.out_channels,
                                      cfg.scaled(ENCODER_STAGE_CHANNELS[1]), dtype=dtype)
        self.dense3 = DenseBlock(rng, self.trans2.out_channels, ENCODER_STAGE_PAIRS[2], g, dtype=dtype)
        self.trans3 = TransitionBlock(rng, self.dense3.out_channels,
                                      cfg.scaled(ENCODER_STAGE_CHANNELS[2]),
                                      pool=False, dtype=dtype)

    def forward(self, x: Tensor) -> EncoderOutputs:
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"encoder expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        base = pool("max", relu(self.base_conv.forward(x)), 3, 2, pad=1)
        dt1 = self.trans1.forward(self.dense1.forward(base))
        dt2 = self.trans2.forward(self.dense2.forward(dt1))
        dt3 = self.trans3.forward(self.dense3.forward(dt2))
        return EncoderOutputs(base=base, dt1=dt1, dt2=dt2, dt3=dt3)


class Bottleneck(Module):
    """Dense-transition (spatial preserved) followed by two residual blocks."""

    def __init__(self, rng, cfg: BlockConfig, cin: int, dtype=np.float32):
        super().__init__()
        self.dense = DenseBlock(rng, cin, cfg.growth_pairs, cfg.growth, dtype=dtype)
        self.compress = Conv2d(rng, self.dense.out_channels,
                               cfg.scaled(BOTTLENECK_CHANNELS), 1, dtype=dtype)
        self.res1 = ResidualBlock(rng, cfg.scaled(BOTTLENECK_CHANNELS), dtype=dtype)
        self.res2 = ResidualBlock(rng, cfg.scaled(BOTTLENECK_CHANNELS), dtype=dtype)
        self.out_channels = cfg.scaled(BOTTLENECK_CHANNELS)

    def forward(self, x: Tensor) -> Tensor:
        return self.res2.forward(self.res1.forward(self.compress.forward(self.dense.forward(x))))


class Decoder(Module):
    """Four upsampling stages with skip concatenation, then the refinement
    pyramid.  Attention runs in stages 1-2 (R = se_reduction) and in the
    refine trunk (R = 3); lighting features, when given, join the first
    stage's input."""

    def __init__(self, rng, cfg: BlockConfig, out_channels: int,
                 lighting_channels: int = 0, raw_channels: int = 4, dtype=np.float32):
        super().__init__()
        g = cfg.growth
        att = cfg.attention_kind
        s5_in = cfg.scaled(BOTTLENECK_CHANNELS) + cfg.scaled(ENCODER_STAGE_CHANNELS[1]) + lighting_channels
        self.stage5 = DecoderStage(rng, s5_in, cfg.scaled(DECODER_STAGE_CHANNELS[0]),
                                   g, att, cfg.se_reduction, dtype=dtype)
        s6_in = cfg.scaled(ENCODER_STAGE_CHANNELS[0]) + self.stage5.out_channels
        self.stage6 = DecoderStage(rng, s6_in, cfg.scaled(DECODER_STAGE_CHANNELS[1]),
                                   g, att, cfg.se_reduction, dtype=dtype)
        self.stage7 = DecoderStage(rng, self.stage6.out_channels,
                                   cfg.scaled(DECODER_STAGE_CHANNELS[2]),
                                   g, None, cfg.se_reduction, dtype=dtype)
        self.stage8 = DecoderStage(rng, self.stage7.out_channels,
                                   cfg.scaled(DECODER_STAGE_CHANNELS[3]),
                                   g, None, cfg.se_reduction, dtype=dtype)
        trunk = raw_channels + self.stage8.out_channels
        self.refine_att = make_attention(rng, att, trunk, REFINE_REDUCTION, dtype=dtype)
        self.refine_norm = BatchNorm2d(trunk, dtype=dtype)
        self.refine_conv = Conv2d(rng, trunk, trunk, 3, pad=1, dtype=dtype)
        self.pyramid = RefinementPyramid(rng, trunk, out_channels, dtype=dtype)
        self.lighting_channels = lighting_channels
        self.out_channels = out_channels

    def forward(self, bottleneck_out: Tensor, skips: EncoderOutputs,
                raw_input: Tensor, lighting_feat: Optional[Tensor] = None) -> Tensor:
        if (lighting_feat is None) != (self.lighting_channels == 0):
            raise ValueError("lighting features presence must match decoder construction")
        entry = [bottleneck_out, skips.dt2]
        if lighting_feat is not None:
            entry.append(lighting_feat)
        x = self.stage5.forward(concat_channels(entry))
        x = self.stage6.forward(concat_channels([skips.dt1, x]))
        x = self.stage7.forward(x)
        x = self.stage8.forward(x)
        t = concat_channels([raw_input, x])
        t = self.refine_conv.forward(relu(self.refine_norm.forward(self.refine_att.forward(t))))
        return self.pyramid.forward(t)
