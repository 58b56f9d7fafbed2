"""One-to-one and any-to-any relighting models with dense fusion.

Both variants share the topology: one encoder feeds three bottlenecks;
the intrinsic bottleneck feeds the albedo and shading decoders, the
other two feed the direct-image and weight-map decoders.  The intrinsic
estimate albedo*shading and the direct estimate are blended per pixel by
the weight map:

    fused = w * direct + (1 - w) * intrinsic

One-to-one additionally rescales the raw shading by a learned linear
function of the normal/target-light cosine; any-to-any prepends the
multiscale feature block and conditions every decoder on frozen guide
lighting features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rng_mod
from .autograd import (Parameter, Tensor, add, concat_channels, mul, relu,
                       sigmoid, sub)
from .blocks import (BlockConfig, Bottleneck, Decoder, Encoder, EncoderOutputs,
                     MultiscaleBlock)
from .imutil import from_chw, to_chw
from .lighting import LightingEstimator
from .module import Module
from .nnops import bicubic_resize
from .scene import LightSetting

__all__ = [
    "VARIANTS",
    "RelitBundle",
    "RelightModel",
    "fuse",
    "normal_adjust",
    "adapt_input_conv",
    "normals_dot_light",
    "ensemble_infer",
    "resize_infer",
]

VARIANTS = ("one_to_one", "any_to_any")
LUMA = (0.299, 0.587, 0.114)


@dataclass
class RelitBundle:
    """All model outputs for one forward pass."""

    albedo: Tensor        # (B,3,H,W) in [0,1]
    shading_raw: Tensor   # shading before the normal adjustment
    shading: Tensor       # shading after the adjustment (== raw unless adjusted)
    intrinsic: Tensor     # albedo * shading
    direct: Tensor        # direct-branch image
    weight: Tensor        # (B,1,H,W) fusion weights, strictly inside (0,1)
    fused: Tensor         # w*direct + (1-w)*intrinsic


def fuse(direct: Tensor, intrinsic: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel convex combination of the two relit estimates."""
    if direct.shape != intrinsic.shape:
        raise ValueError(f"fuse shape mismatch: {direct.shape} vs {intrinsic.shape}")
    one = Tensor(np.asarray(1.0, dtype=weight.data.dtype))
    return add(mul(weight, direct), mul(sub(one, weight), intrinsic))


def normal_adjust(shading_raw: Tensor, normals_dot: Tensor,
                  alpha: Parameter, beta: Parameter) -> Tensor:
    """Linear shading rescale by the normal/light cosine, clamped at zero:
    max(shading * (alpha + beta * <n, omega>), 0)."""
    gain = add(alpha.tensor, mul(beta.tensor, normals_dot))
    return relu(mul(shading_raw, gain))


def normals_dot_light(normals: np.ndarray, light: LightSetting) -> np.ndarray:
    """Per-pixel <n, omega> map, (H, W) float32."""
    omega = np.asarray(light.omega, dtype=np.float64)
    return (np.asarray(normals, dtype=np.float64) @ omega).astype(np.float32)


def adapt_input_conv(variant: str, conv_weight: np.ndarray) -> np.ndarray:
    """First-layer initialization rule.

    one_to_one (4 input channels): the 4th-channel filters become the
    luma combination of the RGB filters.  any_to_any (8 channels): the
    random initialization is kept as is.
    """
    if variant == "one_to_one":
        if conv_weight.shape[1] != 4:
            raise ValueError(f"one_to_one first conv needs 4 input channels, got {conv_weight.shape[1]}")
        w = conv_weight.copy()
        w[:, 3] = LUMA[0] * w[:, 0] + LUMA[1] * w[:, 1] + LUMA[2] * w[:, 2]
        return w
    if variant == "any_to_any":
        if conv_weight.shape[1] != 8:
            raise ValueError(f"any_to_any first conv needs 8 input channels, got {conv_weight.shape[1]}")
        return conv_weight
    raise ValueError(f"unknown variant {variant!r}")


class RelightModel(Module):
    """Dense-fusion relighting network (both variants).

    `no_normals` builds the one-to-one variant without the shading
    adjustment; `no_multiscale` builds the any-to-any variant without
    the multiscale entry block (the encoder then reads the raw 8-channel
    stack, which has the same channel count as the block's output).
    """

    def __init__(self, seed: int, variant: str, cfg: BlockConfig,
                 lighting_channels: int = 0, no_normals: bool = False,
                 no_multiscale: bool = False, dtype=np.float32):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if variant == "any_to_any" and lighting_channels <= 0:
            raise ValueError("any_to_any needs the estimator's feature channel count")
        self.variant = variant
        self.cfg = cfg
        self.no_normals = no_normals
        self.no_multiscale = no_multiscale
        rng = rng_mod.stream(seed, f"model.{variant}")
        in_channels = 4 if variant == "one_to_one" else 8
        if variant == "any_to_any" and not no_multiscale:
            self.multiscale = MultiscaleBlock(rng, in_channels, cfg.growth, dtype=dtype)
        self.encoder = Encoder(rng, cfg, in_channels, dtype=dtype)
        self.encoder.base_conv.weight.data = adapt_input_conv(
            variant, self.encoder.base_conv.weight.data)
        enc_out = self.encoder.trans3.out_channels
        self.bottleneck_iid = Bottleneck(rng, cfg, enc_out, dtype=dtype)
        self.bottleneck_direct = Bottleneck(rng, cfg, enc_out, dtype=dtype)
        self.bottleneck_weight = Bottleneck(rng, cfg, enc_out, dtype=dtype)
        lc = lighting_channels if variant == "any_to_any" else 0
        self.decoder_albedo = Decoder(rng, cfg, 3, lc, dtype=dtype)
        self.decoder_shading = Decoder(rng, cfg, 3, lc, dtype=dtype)
        self.decoder_direct = Decoder(rng, cfg, 3, lc, dtype=dtype)
        self.decoder_weight = Decoder(rng, cfg, 1, lc, dtype=dtype)
        if variant == "one_to_one" and not no_normals:
            self.adjust_alpha = Parameter("adjust_alpha", np.ones(1, dtype=dtype))
            self.adjust_beta = Parameter("adjust_beta", np.zeros(1, dtype=dtype))
        self.lighting_channels = lc

    def forward(self, rgb: Tensor, depth: Tensor,
                normals_dot: Optional[Tensor] = None,
                guide_rgb: Optional[Tensor] = None,
                guide_depth: Optional[Tensor] = None,
                guide_features: Optional[Tensor] = None) -> RelitBundle:
        if rgb.shape[2] % 32 or rgb.shape[3] % 32:
            raise ValueError(f"input resolution must be divisible by 32, got {rgb.shape}")
        raw_input = concat_channels([rgb, depth])
        if self.variant == "one_to_one":
            if normals_dot is None and not self.no_normals:
                raise ValueError("one_to_one needs the normal/light cosine map")
            entry = raw_input
        else:
            if guide_rgb is None or guide_depth is None:
                raise ValueError("any_to_any needs a guide image and guide depth")
            if guide_features is None:
                raise ValueError("any_to_any needs frozen guide lighting features")
            stack = concat_channels([rgb, guide_rgb, depth, guide_depth])
            entry = stack if self.no_multiscale else self.multiscale.forward(stack)
        feats = self.encoder.forward(entry)
        if self.variant == "any_to_any" and not self.no_multiscale:
            feats.multiscale_feat = entry
        b_iid = self.bottleneck_iid.forward(feats.dt3)
        b_direct = self.bottleneck_direct.forward(feats.dt3)
        b_weight = self.bottleneck_weight.forward(feats.dt3)
        lf = guide_features if self.variant == "any_to_any" else None
        albedo = sigmoid(self.decoder_albedo.forward(b_iid, feats, raw_input, lf))
        shading_raw = sigmoid(self.decoder_shading.forward(b_iid, feats, raw_input, lf))
        direct = sigmoid(self.decoder_direct.forward(b_direct, feats, raw_input, lf))
        weight = sigmoid(self.decoder_weight.forward(b_weight, feats, raw_input, lf))
        if self.variant == "one_to_one" and not self.no_normals:
            shading = normal_adjust(shading_raw, normals_dot,
                                    self.adjust_alpha, self.adjust_beta)
        else:
            shading = shading_raw
        intrinsic = mul(albedo, shading)
        fused = fuse(direct, intrinsic, weight)
        return RelitBundle(albedo=albedo, shading_raw=shading_raw, shading=shading,
                           intrinsic=intrinsic, direct=direct, weight=weight,
                           fused=fused)


def _forward_numpy(model: RelightModel, estimator: Optional[LightingEstimator],
                   rgb: np.ndarray, depth: np.ndarray,
                   normals_dot: Optional[np.ndarray],
                   guide_rgb: Optional[np.ndarray],
                   guide_depth: Optional[np.ndarray]) -> np.ndarray:
    """Single-image forward on numpy (H,W[,C]) maps; returns fused (H,W,3)."""
    args = dict(
        rgb=Tensor(to_chw(rgb)[None]),
        depth=Tensor(to_chw(depth)[None]),
    )
    if model.variant == "one_to_one":
        if normals_dot is not None:
            args["normals_dot"] = Tensor(to_chw(normals_dot)[None])
    else:
        gt = Tensor(to_chw(guide_rgb)[None])
        args["guide_rgb"] = gt
        args["guide_depth"] = Tensor(to_chw(guide_depth)[None])
        args["guide_features"] = estimator.forward_features(gt).feature_map
    bundle = model.forward(**args)
    return from_chw(bundle.fused.data[0])


def resize_infer(model: RelightModel, rgb: np.ndarray, depth: np.ndarray,
                 base_resolution: int,
                 estimator: Optional[LightingEstimator] = None,
                 normals_dot: Optional[np.ndarray] = None,
                 guide_rgb: Optional[np.ndarray] = None,
                 guide_depth: Optional[np.ndarray] = None) -> np.ndarray:
    """Resize-in / bicubic-out inference at the model's training resolution."""
    h, w = rgb.shape[:2]
    r = base_resolution

    def down(img):
        if img.shape[:2] == (r, r):
            return img
        return np.clip(bicubic_resize(np.asarray(img, dtype=np.float32), r, r), 0.0, 1.0)

    fused = _forward_numpy(
        model, estimator, down(rgb), down(depth),
        None if normals_dot is None else bicubic_resize(np.asarray(normals_dot, np.float32), r, r),
        None if guide_rgb is None else down(guide_rgb),
        None if guide_depth is None else down(guide_depth),
    )
    if (h, w) == (r, r):
        return fused
    return np.clip(bicubic_resize(fused, h, w), 0.0, 1.0)


def ensemble_infer(model: RelightModel, rgb: np.ndarray, depth: np.ndarray,
                   normals_dot: np.ndarray, base_resolution: int,
                   estimator: Optional[LightingEstimator] = None) -> np.ndarray:
    """One-to-one test-time ensemble: the pixel mean of a full-resolution
    pass and a resized pass interpolated back to full resolution."""
    if model.variant != "one_to_one":
        raise ValueError("the ensemble protocol applies to the one_to_one variant only")
    full = _forward_numpy(model, estimator, rgb, depth, normals_dot, None, None)
    small = resize_infer(model, rgb, depth, base_resolution,
                         estimator=estimator, normals_dot=normals_dot)
    return 0.5 * (full + small)
