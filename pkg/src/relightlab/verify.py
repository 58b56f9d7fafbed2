"""Gradient verification tables for operations, blocks, and full models.

Shared by the `gradcheck` CLI subcommand and the acceptance suite.  Raw
operations check every input coordinate; assembled blocks check the
block input plus a few parameter tensors (per-op weight gradients are
already covered at the op level); full models spot-check parameter
coordinates of the total objective, resampling any coordinate whose
perturbation crosses a relu/argmax kink.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import rng as rng_mod
from .autograd import (Tape, Tensor, concat_channels, div, elementwise, linear,
                       log, reduce_mean, reduce_sum, relu, reshape, sigmoid,
                       softmax_logits, sqrt)
from .blocks import (BlockConfig, DenseBlock, DilatedInception, MultiscaleBlock,
                     RefinementPyramid, ResidualBlock, SqueezeExcite,
                     TransitionBlock)
from .gradcheck import grad_check, grad_check_coords
from .lighting import LightingEstimator
from .losses import LossWeights, ssim, total_objective
from .models import RelightModel
from .nnops import RunningStats, conv2d, normalize_batch, pixel_reshuffle, pool, resample

__all__ = ["op_gradchecks", "block_gradchecks", "model_gradcheck",
           "OP_TOLERANCE", "BLOCK_TOLERANCE", "MODEL_TOLERANCE"]

OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, *shape, margin=1e-2):
    """Uniform values with |x| > margin (kink exclusion for relu)."""
    mag = rng.uniform(margin, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True, dtype=np.float64)


def op_gradchecks(seed: int) -> dict[str, float]:
    """Max relative finite-difference error for every differentiable op."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    x = _t(rng, 2, 3, 6, 6)
    w = _t(rng, 4, 3, 3, 3)
    b = _t(rng, 4)
    checks["conv2d_k3"] = grad_check(
        lambda x, w, b: conv2d(x, w, b, stride=1, zero_pad=1), [x, w, b], seed=seed)
    x7 = _t(rng, 1, 2, 8, 8)
    w7 = _t(rng, 3, 2, 7, 7)
    checks["conv2d_k7_s2"] = grad_check(
        lambda x, w: conv2d(x, w, stride=2, zero_pad=3), [x7, w7], seed=seed)
    x1 = _t(rng, 2, 4, 5, 5)
    w1 = _t(rng, 3, 4, 1, 1)
    checks["conv2d_k1"] = grad_check(lambda x, w: conv2d(x, w), [x1, w1], seed=seed)
    xd = _t(rng, 1, 4, 10, 10)
    wd = _t(rng, 2, 4, 3, 3)
    checks["conv2d_dilated"] = grad_check(
        lambda x, w: conv2d(x, w, zero_pad=2, dilation=2), [xd, wd], seed=seed)

    xp = _t(rng, 2, 3, 6, 6)
    checks["pool_max"] = grad_check(lambda x: pool("max", x, 2, 2), [xp], seed=seed)
    checks["pool_max_padded"] = grad_check(
        lambda x: pool("max", x, 3, 2, pad=1), [_t(rng, 1, 2, 6, 6)], seed=seed)
    checks["pool_avg"] = grad_check(lambda x: pool("avg", x, 2, 2), [_t(rng, 2, 3, 6, 6)], seed=seed)
    checks["pool_global_avg"] = grad_check(
        lambda x: pool("global_avg", x, 1), [_t(rng, 2, 3, 5, 5)], seed=seed)

    checks["pixel_unshuffle"] = grad_check(
        lambda x: pixel_reshuffle("unshuffle", x, 2), [_t(rng, 1, 3, 6, 6)], seed=seed)
    checks["pixel_shuffle"] = grad_check(
        lambda x: pixel_reshuffle("shuffle", x, 2), [_t(rng, 1, 8, 3, 3)], seed=seed)
    checks["resample_nearest"] = grad_check(
        lambda x: resample("nearest_up", x, 8, 10), [_t(rng, 1, 2, 4, 5)], seed=seed)

    xb = _t(rng, 3, 4, 5, 5)
    gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True, dtype=np.float64)
    beta = _t(rng, 4)
    stats = RunningStats.create(4, dtype=np.float64)
    checks["normalize_batch_train"] = grad_check(
        lambda x, g, b: normalize_batch(x, g, b, "train", stats), [xb, gamma, beta], seed=seed)
    stats_eval = RunningStats(mean=rng.uniform(-0.3, 0.3, 4),
                              var=rng.uniform(0.5, 1.5, 4))
    checks["normalize_batch_eval"] = grad_check(
        lambda x, g, b: normalize_batch(x, g, b, "eval", stats_eval), [xb, gamma, beta], seed=seed)

    checks["relu"] = grad_check(relu, [_away_from_zero(rng, 3, 7)], seed=seed)
    checks["sigmoid"] = grad_check(sigmoid, [_t(rng, 3, 7)], seed=seed)
    checks["softmax_logits"] = grad_check(softmax_logits, [_t(rng, 4, 8)], seed=seed)
    checks["log"] = grad_check(log, [_t(rng, 3, 5, lo=0.1, hi=2.0)], seed=seed)
    checks["sqrt"] = grad_check(sqrt, [_t(rng, 3, 5, lo=0.1, hi=2.0)], seed=seed)

    a = _t(rng, 2, 3, 4, 4)
    bb = _t(rng, 2, 3, 4, 4)
    for kind in ("add", "sub", "mul"):
        checks[f"elementwise_{kind}"] = grad_check(
            lambda a, b, kind=kind: elementwise(kind, a, b), [a, bb], seed=seed)
    checks["elementwise_div"] = grad_check(
        lambda a, b: div(a, b), [a, _t(rng, 2, 3, 4, 4, lo=0.5, hi=2.0)], seed=seed)
    checks["elementwise_channel_broadcast"] = grad_check(
        lambda a, b: elementwise("add", a, b), [a, _t(rng, 1, 3, 1, 1)], seed=seed)
    checks["elementwise_scalar_broadcast"] = grad_check(
        lambda a, b: elementwise("mul", a, b), [a, _t(rng, 1)], seed=seed)
    checks["elementwise_map_broadcast"] = grad_check(
        lambda a, b: elementwise("mul", a, b), [a, _t(rng, 2, 1, 4, 4)], seed=seed)

    checks["linear"] = grad_check(
        lambda x, w, b: linear(x, w, b), [_t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)], seed=seed)
    xs = [_t(rng, 1, 2, 3, 3), _t(rng, 1, 1, 3, 3), _t(rng, 1, 3, 3, 3)]
    checks["concat_channels"] = grad_check(
        lambda *xs: concat_channels(xs), xs, seed=seed)
    checks["reduce_mean"] = grad_check(reduce_mean, [_t(rng, 3, 4)], seed=seed)
    checks["reduce_sum"] = grad_check(reduce_sum, [_t(rng, 3, 4)], seed=seed)
    checks["reshape"] = grad_check(lambda x: reshape(x, (4, 6)), [_t(rng, 2, 3, 4)], seed=seed)
    checks["ssim"] = grad_check(
        lambda x, y: ssim(x, y),
        [_t(rng, 1, 1, 12, 12, lo=0.1, hi=0.9), _t(rng, 1, 1, 12, 12, lo=0.1, hi=0.9)],
        seed=seed)
    return checks


def _check_block(block, x: Tensor, seed: int, n_params: int = 3) -> float:
    """Check the block input plus its first `n_params` smallest parameters."""
    params = sorted(block.parameters(), key=lambda p: p.tensor.size)[:n_params]
    tensors = [x] + [p.tensor for p in params]

    def fn(*ts):
        return block.forward(ts[0])

    return grad_check(fn, tensors, seed=seed)


def block_gradchecks(seed: int) -> dict[str, float]:
    """Finite-difference checks of each assembled block (float64)."""
    rng = np.random.default_rng(seed)
    gen = rng_mod.stream(seed, "verify.blocks")
    checks: dict[str, float] = {}
    dense = DenseBlock(gen, 6, 2, 4, dtype=np.float64)
    checks["dense_block"] = _check_block(dense, _t(rng, 1, 6, 6, 6), seed)
    trans = TransitionBlock(gen, 6, dtype=np.float64)
    checks["transition_block"] = _check_block(trans, _t(rng, 1, 6, 6, 6), seed)
    res = ResidualBlock(gen, 4, dtype=np.float64)
    checks["residual_block"] = _check_block(res, _t(rng, 1, 4, 6, 6), seed)
    se = SqueezeExcite(gen, 8, 4, dtype=np.float64)
    checks["se_attention"] = _check_block(se, _t(rng, 1, 8, 5, 5), seed)
    dil = DilatedInception(gen, 8, dtype=np.float64)
    checks["dilated_inception"] = _check_block(dil, _t(rng, 1, 8, 20, 20), seed)
    ms = MultiscaleBlock(gen, 4, 4, dtype=np.float64)
    checks["multiscale_block"] = _check_block(ms, _t(rng, 1, 4, 16, 16), seed)
    pyr = RefinementPyramid(gen, 6, 3, dtype=np.float64)
    checks["refinement_pyramid"] = _check_block(pyr, _t(rng, 1, 6, 32, 32), seed)
    return checks


def model_gradcheck(variant: str, seed: int, coords_per_seed: int = 5,
                    resolution: int = 32) -> float:
    """Finite-difference spot check of the full training objective.

    Builds the model and a synthetic batch in float64 and compares the
    analytic gradient of randomly chosen parameter coordinates against
    central differences, resampling coordinates whose perturbation flips
    a relu mask or pool argmax (kink exclusion).
    """
    rng = np.random.default_rng(seed)
    cfg = BlockConfig(scale_divisor=8)
    est_rng = rng_mod.stream(seed, "verify.est")
    estimator = LightingEstimator(est_rng, scale_divisor=8, dtype=np.float64)
    estimator.freeze()
    lc = estimator.feature_channels if variant == "any_to_any" else 0
    model = RelightModel(seed, variant, cfg, lighting_channels=lc, dtype=np.float64)
    r = resolution
    batch = {
        "rgb": rng.uniform(0.05, 0.95, (1, 3, r, r)),
        "depth": rng.uniform(0.0, 1.0, (1, 1, r, r)),
        "ndir": rng.uniform(-1.0, 1.0, (1, 1, r, r)),
        "guide_rgb": rng.uniform(0.05, 0.95, (1, 3, r, r)),
        "guide_depth": rng.uniform(0.0, 1.0, (1, 1, r, r)),
        "target": rng.uniform(0.05, 0.95, (1, 3, r, r)),
        "albedo": rng.uniform(0.2, 0.95, (1, 3, r, r)),
        "target_shading": rng.uniform(0.05, 1.0, (1, 3, r, r)),
    }
    guide_labels = (np.array([2]), np.array([3])) if variant == "any_to_any" else None

    def objective() -> Tensor:
        with Tape():
            args = {"rgb": Tensor(batch["rgb"], dtype=np.float64),
                    "depth": Tensor(batch["depth"], dtype=np.float64)}
            if variant == "one_to_one":
                args["normals_dot"] = Tensor(batch["ndir"], dtype=np.float64)
            else:
                g = Tensor(batch["guide_rgb"], dtype=np.float64)
                args["guide_rgb"] = g
                args["guide_depth"] = Tensor(batch["guide_depth"], dtype=np.float64)
                args["guide_features"] = estimator.forward_features(g).feature_map
            bundle = model.forward(**args)
            obj, _ = total_objective(
                bundle, Tensor(batch["target"], dtype=np.float64),
                Tensor(batch["albedo"], dtype=np.float64),
                Tensor(batch["target_shading"], dtype=np.float64),
                LossWeights(), variant, estimator=estimator,
                guide_labels=guide_labels)
        return obj

    params = [p for p in model.parameters() if p.trainable]
    coord_rng = np.random.default_rng(seed + 977)
    coords = []
    for _ in range(coords_per_seed):
        pi = int(coord_rng.integers(0, len(params)))
        ci = int(coord_rng.integers(0, params[pi].tensor.size))
        coords.append((pi, ci))
    return grad_check_coords(objective, params, coords, eps=1e-5, rng=coord_rng)
