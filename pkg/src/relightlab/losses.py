"""Training objective and evaluation metrics.

The objective combines a fused-output MSE, intrinsic-decomposition and
direct-branch MSEs, a differentiable SSIM term, and an illumination term
built from the lighting estimator's features (plus light-class negative
log-likelihoods in the any-to-any setting):

    L = L_total + l1*L_iid + l2*L_direct + l3*L_ssim + l4*L_lighting

Metrics: PSNR, SSIM, a proxy perceptual distance derived from
standardized estimator features (labelled proxy everywhere), and the
mean perceptual score MPS = 0.5 * (SSIM + 1 - LPIPS).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import Tensor, add, div, mul, reduce_mean, relu, reshape, sqrt, sub
from .imutil import to_chw
from .lighting import LightingEstimator, nll_from_logits
from .nnops import conv2d, pool
from .scene import N_COLORS, N_DIRECTIONS

__all__ = [
    "LossWeights",
    "MetricReport",
    "mse_loss",
    "loss_total",
    "loss_iid",
    "loss_direct",
    "ssim",
    "loss_ssim",
    "std_features",
    "loss_lighting",
    "total_objective",
    "psnr",
    "ssim_metric",
    "proxy_lpips",
    "mps",
    "compute_report",
    "mean_report",
    "metric_csv_rows",
    "CSV_HEADER",
]

FEATURE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lam_iid: float = 0.4
    lam_direct: float = 0.4
    lam_ssim: float = 0.8
    lam_lighting: float = 0.03

    def __post_init__(self):
        for name in ("lam_iid", "lam_direct", "lam_ssim", "lam_lighting"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def loss_total(fused: Tensor, target: Tensor) -> Tensor:
    return mse_loss(fused, target)


def loss_direct(direct: Tensor, target: Tensor) -> Tensor:
    return mse_loss(direct, target)


def loss_iid(albedo_hat: Tensor, shading_hat: Tensor, albedo_gt: Tensor,
             shading_gt: Tensor, target: Tensor) -> Tensor:
    """Composition consistency plus direct albedo and shading supervision."""
    comp = mse_loss(mul(albedo_hat, shading_hat), target)
    return add(add(comp, mse_loss(albedo_hat, albedo_gt)),
               mse_loss(shading_hat, shading_gt))


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=np.float32) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g1 = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g2 = np.outer(g1, g1)
    g2 /= g2.sum()
    return g2.reshape(1, 1, size, size).astype(dtype)


def _window_filter(x: Tensor, window: Tensor) -> Tensor:
    b, c, h, w = x.shape
    flat = reshape(x, (b * c, 1, h, w))
    y = conv2d(flat, window)
    return reshape(y, (b, c, y.shape[2], y.shape[3]))


def ssim(x: Tensor, y: Tensor, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> Tensor:
    """Windowed structural similarity, averaged over windows and channels.

    Differentiable; uses an 11x11 Gaussian window (sigma 1.5) over valid
    positions with K1=0.01, K2=0.03 and dynamic range `peak`.
    """
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.data.ndim != 4:
        raise ValueError(f"ssim expects (B,C,H,W) tensors, got {x.shape}")
    if x.shape[2] < window_size or x.shape[3] < window_size:
        raise ValueError(
            f"ssim needs images at least {window_size}x{window_size}, got {x.shape}"
        )
    win = Tensor(gaussian_window(window_size, sigma, x.data.dtype))
    mu_x = _window_filter(x, win)
    mu_y = _window_filter(y, win)
    xx = _window_filter(mul(x, x), win)
    yy = _window_filter(mul(y, y), win)
    xy = _window_filter(mul(x, y), win)
    var_x = sub(xx, mul(mu_x, mu_x))
    var_y = sub(yy, mul(mu_y, mu_y))
    cov = sub(xy, mul(mu_x, mu_y))
    c1 = _const((k1 * peak) ** 2, x)
    c2 = _const((k2 * peak) ** 2, x)
    num = mul(add(mul(_const(2.0, x), mul(mu_x, mu_y)), c1),
              add(mul(_const(2.0, x), cov), c2))
    den = mul(add(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), c1),
              add(add(var_x, var_y), c2))
    return reduce_mean(div(num, den))


def loss_ssim(fused: Tensor, target: Tensor) -> Tensor:
    return sub(_const(1.0, fused), ssim(fused, target))


def std_features(feat: Tensor) -> Tensor:
    """Standardize a feature map per sample and channel over space."""
    m = pool("global_avg", feat, 1)
    d = sub(feat, m)
    var = pool("global_avg", mul(d, d), 1)
    return div(d, sqrt(add(var, _const(FEATURE_EPS, feat))))


def loss_lighting(fused: Tensor, target: Tensor, estimator: LightingEstimator,
                  variant: str, guide_labels: Optional[tuple] = None) -> Tensor:
    """Illumination loss: standardized-feature MSE, plus guide light-class
    negative log-likelihoods in the any-to-any variant."""
    feat_fused = std_features(estimator.forward_features(fused).feature_map)
    feat_target = std_features(estimator.forward_features(target).feature_map)
    term = mse_loss(feat_fused, feat_target)
    if variant == "one_to_one":
        return term
    if variant != "any_to_any":
        raise ValueError(f"unknown variant {variant!r}")
    if guide_labels is None:
        raise ValueError("any-to-any lighting loss needs guide light labels")
    dirs, cols = guide_labels
    pred = estimator.forward_classify(fused)
    term = add(term, nll_from_logits(pred.dir_logits, np.asarray(dirs), N_DIRECTIONS))
    term = add(term, nll_from_logits(pred.color_logits, np.asarray(cols), N_COLORS))
    return term


def total_objective(bundle, target: Tensor, albedo_gt: Tensor, shading_gt: Tensor,
                    weights: LossWeights, variant: str,
                    estimator: Optional[LightingEstimator] = None,
                    guide_labels: Optional[tuple] = None,
                    include_lighting: bool = True) -> tuple[Tensor, dict]:
    """Weighted sum of the five terms plus a float breakdown per term."""
    l_total = loss_total(bundle.fused, target)
    l_iid = loss_iid(bundle.albedo, bundle.shading, albedo_gt, shading_gt, target)
    l_direct = loss_direct(bundle.direct, target)
    l_ssim = loss_ssim(bundle.fused, target)
    objective = l_total
    objective = add(objective, mul(_const(weights.lam_iid, l_total), l_iid))
    objective = add(objective, mul(_const(weights.lam_direct, l_total), l_direct))
    objective = add(objective, mul(_const(weights.lam_ssim, l_total), l_ssim))
    if include_lighting:
        if estimator is None:
            raise ValueError("lighting term requires the estimator")
        l_light = loss_lighting(bundle.fused, target, estimator, variant, guide_labels)
        objective = add(objective, mul(_const(weights.lam_lighting, l_total), l_light))
        light_val = l_light.item()
    else:
        light_val = 0.0
    breakdown = {
        "loss_total": l_total.item(),
        "loss_iid": l_iid.item(),
        "loss_direct": l_direct.item(),
        "loss_ssim": l_ssim.item(),
        "loss_lighting": light_val,
        "objective": objective.item(),
    }
    return objective, breakdown


# ---------------------------------------------------------------------------
# metrics (float64 numpy, not differentiable)

def _hwc64(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf for identical images."""
    x, y = _hwc64(x), _hwc64(y)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    d = (x - y).ravel()
    mse = math.fsum(d * d) / d.size
    if mse == 0.0:
        return float("inf")
    return 20.0 * math.log10(peak / math.sqrt(mse))


def ssim_metric(x: np.ndarray, y: np.ndarray) -> float:
    """SSIM of two (H, W[, C]) images in [0, 1], computed in float64."""
    xt = Tensor(to_chw(_hwc64(x))[None], dtype=np.float64)
    yt = Tensor(to_chw(_hwc64(y))[None], dtype=np.float64)
    return ssim(xt, yt).item()


def _standardized_features(img: np.ndarray, estimator: LightingEstimator) -> np.ndarray:
    t = Tensor(to_chw(np.asarray(img, dtype=np.float32))[None])
    f = estimator.forward_features(t).feature_map.data.astype(np.float64)
    m = f.mean(axis=(2, 3), keepdims=True)
    v = ((f - m) ** 2).mean(axis=(2, 3), keepdims=True)
    return (f - m) / np.sqrt(v + FEATURE_EPS)


def proxy_lpips(x: np.ndarray, y: np.ndarray, estimator: LightingEstimator) -> float:
    """Documented LPIPS stand-in: 1 - exp(-d) where d is the mean squared
    distance between standardized estimator features.  Reported as
    'proxy' in every output."""
    fx = _standardized_features(x, estimator)
    fy = _standardized_features(y, estimator)
    d = float(((fx - fy) ** 2).mean())
    return 1.0 - math.exp(-d)


def mps(ssim_val: float, lpips_val: float) -> float:
    """Mean perceptual score: 0.5 * (SSIM + 1 - LPIPS)."""
    return 0.5 * (ssim_val + 1.0 - lpips_val)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    proxy_lpips: float
    mps: float


def compute_report(pred: np.ndarray, gt: np.ndarray,
                   estimator: LightingEstimator,
                   lpips_value: Optional[float] = None) -> MetricReport:
    """Metrics for one image pair; `lpips_value` substitutes an externally
    supplied perceptual distance for the proxy."""
    s = ssim_metric(pred, gt)
    lp = proxy_lpips(pred, gt, estimator) if lpips_value is None else float(lpips_value)
    return MetricReport(psnr=psnr(pred, gt), ssim=s, proxy_lpips=lp, mps=mps(s, lp))


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty report list")
    n = len(reports)
    return MetricReport(
        psnr=sum(r.psnr for r in reports) / n,
        ssim=sum(r.ssim for r in reports) / n,
        proxy_lpips=sum(r.proxy_lpips for r in reports) / n,
        mps=sum(r.mps for r in reports) / n,
    )


CSV_HEADER = "sample_id,psnr_db,ssim,proxy_lpips,mps"


def metric_csv_rows(named_reports: Sequence[tuple[str, MetricReport]]) -> list[str]:
    rows = [CSV_HEADER]
    for sample_id, r in named_reports:
        rows.append(f"{sample_id},{r.psnr!r},{r.ssim!r},{r.proxy_lpips!r},{r.mps!r}")
    return rows
