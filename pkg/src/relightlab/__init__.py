"""relightlab: a dense-fusion image relighting toolkit.

The package pairs an intrinsic-decomposition branch (albedo x shading)
with a direct image-to-image branch and blends them with a learned
per-pixel weight map.  A procedural Lambertian scene renderer supplies
exact albedo, shading, depth, and normals for supervision, and a small
tape-based autograd core on numpy carries all network computation.
"""

from .autograd import Parameter, Tape, Tensor, set_debug
from .blocks import BlockConfig
from .gradcheck import grad_check
from .lighting import LightingEstimator, pretrain
from .losses import (LossWeights, MetricReport, compute_report, mps,
                     proxy_lpips, psnr, ssim, ssim_metric)
from .models import RelightModel, RelitBundle, ensemble_infer, fuse, normal_adjust
from .scene import (LightSetting, RenderedSample, SceneSpec, compose,
                    depth_to_normals, kelvin_to_rgb, make_any_to_any_set,
                    make_one_to_one_set, render_shading)
from .train import TrainConfig, evaluate_split, train_loop

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "Parameter", "set_debug", "grad_check",
    "BlockConfig", "RelightModel", "RelitBundle", "fuse", "normal_adjust",
    "ensemble_infer", "LightingEstimator", "pretrain",
    "LossWeights", "MetricReport", "ssim", "ssim_metric", "psnr",
    "proxy_lpips", "mps", "compute_report",
    "SceneSpec", "LightSetting", "RenderedSample", "kelvin_to_rgb",
    "depth_to_normals", "render_shading", "compose",
    "make_one_to_one_set", "make_any_to_any_set",
    "TrainConfig", "train_loop", "evaluate_split",
    "__version__",
]
