"""Deterministic training loop: augmentation, Adam with step decay,
per-epoch validation, and bit-reproducible checkpointing.

All randomness flows through named Philox streams derived from the
config seed, so (seed, config) fully determines every emitted number,
and resuming from a checkpoint restores the exact stream states.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .autograd import Tape, Tensor
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .imutil import bilinear_resize, rotate_reflect, to_chw
from .lighting import LightingEstimator
from .losses import (LossWeights, MetricReport, compute_report, mean_report,
                     total_objective)
from .models import (RelightModel, ensemble_infer, normals_dot_light,
                     resize_infer, _forward_numpy)
from .optim import Adam, NonFiniteGradient, lr_at_epoch
from .scene import AnyToAnySet, GuideTriplet, LightSetting, RenderedSample

__all__ = [
    "TrainConfig",
    "TrainingAborted",
    "default_patch",
    "augment_one_to_one",
    "train_loop",
    "evaluate_split",
    "input_copy_baseline",
    "CURVE_HEADER",
]

CURVE_HEADER = "epoch,step,loss_total,loss_iid,loss_direct,loss_ssim,loss_lighting,objective"
AUGMENT_KINDS = ("crop", "resize", "rotate")
MAX_ROTATION_DEG = 12.0


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[str]):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    decay_factor: float = 0.7
    epochs: int = 25
    batch_size: int = 8
    seed: int = 7
    weights: LossWeights = field(default_factory=LossWeights)
    no_normals: bool = False
    no_lighting_loss: bool = False
    no_multiscale: bool = False
    patch: Optional[int] = None

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def default_patch(resolution: int) -> int:
    """Quarter-resolution training patches, 32-aligned, at least 32."""
    return max(32, round(resolution / 4 / 32) * 32)


def _transform_maps(sample: RenderedSample, fn) -> dict:
    out = {
        "rgb": fn(sample.input_image),
        "depth": fn(sample.depth),
        "normals": fn(sample.normals),
        "albedo": fn(sample.albedo),
        "target": fn(sample.target_image),
        "target_shading": fn(sample.target_shading),
    }
    # interpolation shortens normal vectors; restore unit length
    n = out["normals"].astype(np.float64)
    out["normals"] = (n / np.linalg.norm(n, axis=-1, keepdims=True)).astype(np.float32)
    return out


def augment_one_to_one(sample: RenderedSample, gen: np.random.Generator,
                       patch: int) -> dict:
    """One of: random crop, full resize, or resize + small rotation
    (uniform 0..12 degrees, reflection padding).  The identical spatial
    transform is applied to every map of the pair; there is no flip and
    no large rotation, so the light relationship is preserved."""
    res = sample.input_image.shape[0]
    if patch > res:
        raise ValueError(f"patch {patch} exceeds resolution {res}")
    kind = AUGMENT_KINDS[int(gen.integers(0, len(AUGMENT_KINDS)))]
    if kind == "crop":
        top = int(gen.integers(0, res - patch + 1))
        left = int(gen.integers(0, res - patch + 1))
        out = _transform_maps(sample, lambda m: np.ascontiguousarray(
            m[top:top + patch, left:left + patch]))
    elif kind == "resize":
        out = _transform_maps(sample, lambda m: bilinear_resize(m, patch, patch).astype(np.float32))
    else:
        angle = float(gen.uniform(0.0, MAX_ROTATION_DEG))
        out = _transform_maps(
            sample,
            lambda m: rotate_reflect(
                bilinear_resize(m, patch, patch), angle).astype(np.float32))
    out["kind"] = kind
    return out


def _stack_one_to_one(entries: list[dict], to_light: LightSetting) -> dict:
    batch = {
        "rgb": np.stack([to_chw(e["rgb"]) for e in entries]),
        "depth": np.stack([to_chw(e["depth"]) for e in entries]),
        "ndir": np.stack([to_chw(normals_dot_light(e["normals"], to_light)) for e in entries]),
        "albedo": np.stack([to_chw(e["albedo"]) for e in entries]),
        "target": np.stack([to_chw(e["target"]) for e in entries]),
        "target_shading": np.stack([to_chw(e["target_shading"]) for e in entries]),
    }
    return batch


def _stack_any_to_any(triplets: Sequence[GuideTriplet]) -> dict:
    ins = [t.input for t in triplets]
    guides = [t.guide for t in triplets]
    targets = [t.target for t in triplets]
    return {
        "rgb": np.stack([to_chw(s.input_image) for s in ins]),
        "depth": np.stack([to_chw(s.depth) for s in ins]),
        "guide_rgb": np.stack([to_chw(s.input_image) for s in guides]),
        "guide_depth": np.stack([to_chw(s.depth) for s in guides]),
        "albedo": np.stack([to_chw(s.albedo) for s in ins]),
        "target": np.stack([to_chw(s.input_image) for s in targets]),
        "target_shading": np.stack([to_chw(s.shading) for s in targets]),
        "guide_dirs": np.array([s.input_light.direction_index for s in guides]),
        "guide_colors": np.array([s.input_light.color_index for s in guides]),
    }


def _model_inputs(model: RelightModel, estimator: Optional[LightingEstimator],
                  batch: dict) -> dict:
    args = {
        "rgb": Tensor(batch["rgb"]),
        "depth": Tensor(batch["depth"]),
    }
    if model.variant == "one_to_one":
        if not model.no_normals:
            args["normals_dot"] = Tensor(batch["ndir"])
    else:
        guide_rgb = Tensor(batch["guide_rgb"])
        args["guide_rgb"] = guide_rgb
        args["guide_depth"] = Tensor(batch["guide_depth"])
        args["guide_features"] = estimator.forward_features(guide_rgb).feature_map
    return args


def _format_row(epoch: int, step: int, breakdown: dict) -> str:
    return ",".join([str(epoch), str(step)] + [
        repr(breakdown[k]) for k in ("loss_total", "loss_iid", "loss_direct",
                                     "loss_ssim", "loss_lighting", "objective")])


@dataclass
class TrainResult:
    curve_rows: list
    val_reports: list          # per-epoch mean MetricReport
    checkpoint_path: str
    curves_path: str


def _rng_snapshot(streams: dict) -> dict:
    return {name: rng_mod.get_state(gen) for name, gen in streams.items()}


def train_loop(model: RelightModel, train_data, val_data, cfg: TrainConfig,
               variant: str, out_dir, base_resolution: int,
               estimator: Optional[LightingEstimator] = None,
               to_light: Optional[LightSetting] = None,
               resume_from: Optional[str] = None,
               keep_epoch_checkpoints: bool = True) -> TrainResult:
    """Seeded optimization; returns loss curves and the final checkpoint.

    `train_data` is a list of paired samples (one_to_one) or a triplet
    set (any_to_any); `val_data` mirrors it.  Non-finite losses abort
    with a pointer to the last good checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if variant == "one_to_one" and to_light is None:
        raise ValueError("one_to_one training needs the target light for the cosine map")
    if not cfg.no_lighting_loss and estimator is None:
        raise ValueError("training with the lighting term needs a (frozen) estimator")
    patch = cfg.patch if cfg.patch is not None else default_patch(base_resolution)
    opt = Adam(model.parameters())
    streams = {
        "shuffle": rng_mod.stream(cfg.seed, "train.shuffle"),
        "augment": rng_mod.stream(cfg.seed, "train.augment"),
    }
    start_epoch = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from, expected_role=f"relight-{variant}")
        _load_params(model, ck.params)
        if ck.opt_state is not None:
            opt.load_state_dict(ck.opt_state)
        for name, snap in ck.rng_states.items():
            rng_mod.set_state(streams[name], snap)
        start_epoch = ck.epoch

    meta = {"variant": variant, "base_resolution": base_resolution,
            "scale_divisor": model.cfg.scale_divisor,
            "attention_kind": model.cfg.attention_kind,
            "growth_pairs": model.cfg.growth_pairs,
            "se_reduction": model.cfg.se_reduction,
            "lighting_channels": model.lighting_channels,
            "no_normals": model.no_normals,
            "no_multiscale": model.no_multiscale}
    if to_light is not None:
        meta["to_light"] = {"direction_index": to_light.direction_index,
                            "color_index": to_light.color_index}

    rows = [CURVE_HEADER]
    val_reports: list[MetricReport] = []
    n = len(train_data)
    last_ckpt: Optional[str] = str(resume_from) if resume_from else None
    for epoch in range(start_epoch, cfg.epochs):
        model.train_mode(True)
        lr = lr_at_epoch(epoch, cfg.initial_lr, cfg.decay_factor)
        perm = streams["shuffle"].permutation(n)
        step = 0
        for start in range(0, n - n % cfg.batch_size or n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) == 0:
                break
            if variant == "one_to_one":
                entries = [augment_one_to_one(train_data[i], streams["augment"], patch)
                           for i in idx]
                batch = _stack_one_to_one(entries, to_light)
                guide_labels = None
            else:
                batch = _stack_any_to_any([train_data[i] for i in idx])
                guide_labels = (batch["guide_dirs"], batch["guide_colors"])
            args = _model_inputs(model, estimator, batch)
            with Tape() as tape:
                bundle = model.forward(**args)
                objective, breakdown = total_objective(
                    bundle, Tensor(batch["target"]), Tensor(batch["albedo"]),
                    Tensor(batch["target_shading"]), cfg.weights, variant,
                    estimator=estimator, guide_labels=guide_labels,
                    include_lighting=not cfg.no_lighting_loss)
                if not np.isfinite(breakdown["objective"]):
                    raise TrainingAborted(
                        f"non-finite objective at epoch {epoch} step {step}", last_ckpt)
                tape.backward(objective)
            try:
                opt.step(lr)
            except NonFiniteGradient as exc:
                raise TrainingAborted(str(exc), last_ckpt) from exc
            opt.zero_grad()
            rows.append(_format_row(epoch, step, breakdown))
            step += 1
        report, _ = evaluate_split(model, val_data, "plain", variant,
                                   base_resolution, estimator=estimator)
        val_reports.append(report)
        ckpt = Checkpoint(
            role=f"relight-{variant}", meta=meta, epoch=epoch + 1,
            params={name: p.data for name, p in model.parameter_dict().items()},
            rng_states=_rng_snapshot(streams), opt_state=opt.state_dict())
        path = out_dir / f"checkpoint_ep{epoch + 1:03d}.rlft"
        save_checkpoint(path, ckpt)
        if not keep_epoch_checkpoints and last_ckpt and Path(last_ckpt).name.startswith("checkpoint_ep"):
            Path(last_ckpt).unlink(missing_ok=True)
        last_ckpt = str(path)

    final_path = out_dir / "checkpoint.rlft"
    if last_ckpt is None:
        raise TrainingAborted("no epochs were run", None)
    final_bytes = Path(last_ckpt).read_bytes()
    final_path.write_bytes(final_bytes)
    curves_path = out_dir / "curves.csv"
    curves_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return TrainResult(curve_rows=rows, val_reports=val_reports,
                       checkpoint_path=str(final_path), curves_path=str(curves_path))


def _load_params(model: RelightModel, params: dict) -> None:
    own = model.parameter_dict()
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, "
                         f"extra {sorted(extra)[:3]}")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise ValueError(f"parameter {name!r} shape mismatch")
        p.data = params[name].astype(p.data.dtype)


def evaluate_split(model: RelightModel, samples, protocol: str, variant: str,
                   base_resolution: int,
                   estimator: Optional[LightingEstimator] = None,
                   ) -> tuple[MetricReport, list[MetricReport]]:
    """Per-sample metrics and their mean over a validation split."""
    if protocol not in ("plain", "ensemble"):
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == "ensemble" and variant != "one_to_one":
        raise ValueError("the ensemble protocol applies to one_to_one only")
    if estimator is None:
        raise ValueError("evaluation needs the estimator for the proxy perceptual metric")
    was_training = model.training
    model.train_mode(False)
    reports = []
    try:
        for item in samples:
            if variant == "one_to_one":
                sample = item
                ndir = normals_dot_light(sample.normals, sample.target_light)
                if protocol == "ensemble":
                    fused = ensemble_infer(model, sample.input_image, sample.depth,
                                           ndir, base_resolution, estimator=estimator)
                else:
                    fused = _forward_numpy(model, estimator, sample.input_image,
                                           sample.depth, ndir, None, None)
                target = sample.target_image
            else:
                triplet = item
                fused = resize_infer(model, triplet.input.input_image,
                                     triplet.input.depth, base_resolution,
                                     estimator=estimator,
                                     guide_rgb=triplet.guide.input_image,
                                     guide_depth=triplet.guide.depth)
                target = triplet.target.input_image
            reports.append(compute_report(fused, target, estimator))
    finally:
        model.train_mode(was_training)
    return mean_report(reports), reports


def input_copy_baseline(samples, estimator: LightingEstimator) -> MetricReport:
    """Metrics of simply returning the input image unchanged."""
    reports = [compute_report(s.input_image, s.target_image, estimator)
               for s in samples]
    return mean_report(reports)
