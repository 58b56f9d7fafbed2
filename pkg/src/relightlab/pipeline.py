"""End-to-end runs: dataset construction, estimator pretraining, model
training, evaluation, and the ablation matrix.  The CLI and the
acceptance suite both drive these entry points."""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rng_mod
from .autograd import Tensor
from .blocks import BlockConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .imutil import to_chw
from .lighting import LightingEstimator, PretrainReport, pretrain
from .losses import mean_report, metric_csv_rows
from .models import RelightModel
from .scene import (AnyToAnySet, LightSetting, SceneSpec, make_any_to_any_set,
                    make_one_to_one_set)
from .train import (TrainConfig, TrainResult, evaluate_split,
                    input_copy_baseline, train_loop)

__all__ = [
    "scene_template",
    "lights_from_config",
    "build_one_to_one_data",
    "build_any_to_any_data",
    "build_estimator",
    "pretrain_estimator",
    "save_estimator",
    "load_estimator",
    "build_model",
    "model_from_checkpoint",
    "train_config_from",
    "run_training",
    "run_ablation",
    "ABLATION_MATRIX",
]

ESTIMATOR_ROLE = "lighting-estimator"


def scene_template(cfg: RunConfig) -> SceneSpec:
    s = cfg.scene
    return SceneSpec(seed=0, resolution=s.resolution, bump_count=s.bump_count,
                     albedo_regions=s.albedo_regions,
                     shadows_enabled=s.shadows_enabled, ambient=s.ambient,
                     z_gain=s.z_gain, albedo_noise=s.albedo_noise)


def lights_from_config(cfg: RunConfig) -> tuple[LightSetting, LightSetting]:
    s = cfg.scene
    return (LightSetting.from_indices(s.from_direction, s.from_color),
            LightSetting.from_indices(s.to_direction, s.to_color))


def _capped(seq, cap: Optional[int]):
    if cap is None or len(seq) <= cap:
        return list(seq)
    stride = len(seq) / cap
    return [seq[int(i * stride)] for i in range(cap)]


def build_one_to_one_data(cfg: RunConfig):
    from_light, to_light = lights_from_config(cfg)
    template = scene_template(cfg)
    train_seed = rng_mod.derive_key(cfg.seed, "data.train") % (2 ** 62)
    val_seed = rng_mod.derive_key(cfg.seed, "data.val") % (2 ** 62)
    train = make_one_to_one_set(cfg.scene.n_train_scenes, from_light, to_light,
                                train_seed, template)
    val = make_one_to_one_set(cfg.scene.n_val_scenes, from_light, to_light,
                              val_seed, template)
    return train, val, from_light, to_light


def build_any_to_any_data(cfg: RunConfig, max_train: Optional[int] = None,
                          max_val: Optional[int] = None):
    template = scene_template(cfg)
    train_seed = rng_mod.derive_key(cfg.seed, "data.train") % (2 ** 62)
    val_seed = rng_mod.derive_key(cfg.seed, "data.val") % (2 ** 62)
    train_set = make_any_to_any_set(cfg.scene.n_train_scenes,
                                    cfg.scene.guides_per_sample, train_seed, template)
    val_set = make_any_to_any_set(max(cfg.scene.n_val_scenes, 2), 1, val_seed, template)
    return _capped(train_set, max_train), _capped(val_set, max_val)


def build_estimator(cfg: RunConfig, dtype=np.float32) -> LightingEstimator:
    rng = rng_mod.stream(cfg.seed, "estimator.init")
    return LightingEstimator(rng, scale_divisor=cfg.model.scale_divisor, dtype=dtype)


def pretrain_estimator(cfg: RunConfig) -> tuple[LightingEstimator, PretrainReport]:
    """Train the light classifier on a grid of synthetic scenes and freeze it."""
    template = scene_template(cfg)
    data_seed = rng_mod.derive_key(cfg.seed, "estimator.data") % (2 ** 62)
    n_scenes = max(cfg.train.estimator_scenes, 2)
    grid = make_any_to_any_set(n_scenes, 1, data_seed, template)
    split = max(1, int(n_scenes * 0.8))
    train_samples = [grid.sample(s, d, c) for s in range(split)
                     for d in range(8) for c in range(5)]
    val_samples = [grid.sample(s, d, c) for s in range(split, n_scenes)
                   for d in range(8) for c in range(5)]
    estimator = build_estimator(cfg)
    report = pretrain(estimator, train_samples, val_samples,
                      epochs=cfg.train.estimator_epochs,
                      seed=rng_mod.derive_key(cfg.seed, "estimator.train") % (2 ** 62))
    estimator.freeze()
    return estimator, report


def save_estimator(path, estimator: LightingEstimator, report: Optional[PretrainReport],
                   cfg: RunConfig) -> None:
    meta = {"scale_divisor": estimator.scale_divisor,
            "feature_channels": estimator.feature_channels}
    if report is not None:
        meta["accuracy_direction"] = report.accuracy_direction
        meta["accuracy_color"] = report.accuracy_color
    ck = Checkpoint(role=ESTIMATOR_ROLE, meta=meta, epoch=0,
                    params={n: p.data for n, p in estimator.parameter_dict().items()},
                    rng_states={}, opt_state=None)
    save_checkpoint(path, ck)


def load_estimator(path) -> LightingEstimator:
    ck = load_checkpoint(path, expected_role=ESTIMATOR_ROLE)
    est = LightingEstimator(np.random.default_rng(0),
                            scale_divisor=int(ck.meta["scale_divisor"]))
    own = est.parameter_dict()
    for name, p in own.items():
        p.data = ck.params[name]
    est.freeze()
    return est


def build_model(cfg: RunConfig, estimator: Optional[LightingEstimator],
                seed: Optional[int] = None) -> RelightModel:
    m = cfg.model
    block_cfg = BlockConfig(scale_divisor=m.scale_divisor,
                            growth_pairs=m.growth_pairs,
                            se_reduction=m.se_reduction,
                            attention_kind=m.attention_kind)
    lc = estimator.feature_channels if (estimator and m.variant == "any_to_any") else 0
    return RelightModel(cfg.seed if seed is None else seed, m.variant, block_cfg,
                        lighting_channels=lc, no_normals=m.no_normals,
                        no_multiscale=m.no_multiscale)


def model_from_checkpoint(path) -> tuple[RelightModel, dict]:
    ck = load_checkpoint(path)
    if not ck.role.startswith("relight-"):
        raise ValueError(f"{path}: not a relighting model checkpoint (role {ck.role!r})")
    meta = ck.meta
    block_cfg = BlockConfig(scale_divisor=int(meta["scale_divisor"]),
                            growth_pairs=int(meta["growth_pairs"]),
                            se_reduction=int(meta["se_reduction"]),
                            attention_kind=meta["attention_kind"])
    model = RelightModel(0, meta["variant"], block_cfg,
                         lighting_channels=int(meta["lighting_channels"]),
                         no_normals=bool(meta.get("no_normals", False)),
                         no_multiscale=bool(meta.get("no_multiscale", False)))
    own = model.parameter_dict()
    for name, p in own.items():
        p.data = ck.params[name]
    model.eval_mode()
    return model, meta


def train_config_from(cfg: RunConfig, seed: Optional[int] = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(initial_lr=t.initial_lr, decay_factor=t.decay_factor,
                       epochs=t.epochs, batch_size=t.batch_size,
                       seed=cfg.seed if seed is None else seed,
                       weights=t.weights(), no_normals=cfg.model.no_normals,
                       no_lighting_loss=cfg.model.no_lighting_loss,
                       no_multiscale=cfg.model.no_multiscale, patch=t.patch)


def run_training(cfg: RunConfig, out_dir, estimator: Optional[LightingEstimator] = None,
                 train_seed: Optional[int] = None,
                 max_train: Optional[int] = None, max_val: Optional[int] = None,
                 keep_epoch_checkpoints: bool = True) -> dict:
    """Full run: data, estimator, model, training, final evaluation.

    Returns a summary dict (also written to <out_dir>/summary.json).
    """
    t0 = time.time()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "resolved_config.json")
    estimator_report = None
    if estimator is None:
        estimator, estimator_report = pretrain_estimator(cfg)
        save_estimator(out_dir / "estimator.rlft", estimator, estimator_report, cfg)
    variant = cfg.model.variant
    to_light = None
    if variant == "one_to_one":
        train_data, val_data, _, to_light = build_one_to_one_data(cfg)
        train_data = train_data if max_train is None else train_data[:max_train]
        val_data = val_data if max_val is None else val_data[:max_val]
    else:
        train_data, val_data = build_any_to_any_data(cfg, max_train, max_val)
    model = build_model(cfg, estimator, seed=train_seed)
    tcfg = train_config_from(cfg, seed=train_seed)

    init_albedo_mse = evaluate_albedo_mse(model, val_data, variant,
                                          cfg.scene.resolution, estimator)
    result = train_loop(model, train_data, val_data, tcfg, variant, out_dir,
                        cfg.scene.resolution, estimator=estimator,
                        to_light=to_light,
                        keep_epoch_checkpoints=keep_epoch_checkpoints)
    final_albedo_mse = evaluate_albedo_mse(model, val_data, variant,
                                           cfg.scene.resolution, estimator)
    final_report, per_sample = evaluate_split(
        model, val_data, cfg.eval.protocol, variant, cfg.scene.resolution,
        estimator=estimator)
    if variant == "one_to_one":
        baseline = input_copy_baseline(val_data, estimator)
    else:
        baseline = mean_report([
            _triplet_baseline(t, estimator) for t in val_data])
    rows = metric_csv_rows(
        [(f"val_{i:04d}", r) for i, r in enumerate(per_sample)]
        + [("mean", final_report)])
    (out_dir / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    val_curve = [{"psnr": r.psnr, "ssim": r.ssim, "proxy_lpips": r.proxy_lpips,
                  "mps": r.mps} for r in result.val_reports]
    epoch_objectives = _epoch_means(result.curve_rows)
    summary = {
        "variant": variant,
        "seed": tcfg.seed,
        "runtime_sec": time.time() - t0,
        "final": val_curve[-1] if val_curve else None,
        "final_protocol": {"protocol": cfg.eval.protocol, "psnr": final_report.psnr,
                           "ssim": final_report.ssim,
                           "proxy_lpips": final_report.proxy_lpips,
                           "mps": final_report.mps},
        "baseline_psnr": baseline.psnr,
        "baseline_ssim": baseline.ssim,
        "epoch_mean_objective": epoch_objectives,
        "albedo_mse_initial": init_albedo_mse,
        "albedo_mse_final": final_albedo_mse,
        "checkpoint": result.checkpoint_path,
        "curves": result.curves_path,
        "val_curve": val_curve,
    }
    if estimator_report is not None:
        summary["estimator_accuracy_direction"] = estimator_report.accuracy_direction
        summary["estimator_accuracy_color"] = estimator_report.accuracy_color
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return summary


def _triplet_baseline(triplet, estimator):
    from .losses import compute_report
    return compute_report(triplet.input.input_image, triplet.target.input_image,
                          estimator)


def _epoch_means(rows: list[str]) -> list[float]:
    sums: dict[int, list] = {}
    for row in rows[1:]:
        parts = row.split(",")
        epoch = int(parts[0])
        sums.setdefault(epoch, []).append(float(parts[-1]))
    return [float(np.mean(sums[e])) for e in sorted(sums)]


def evaluate_albedo_mse(model: RelightModel, samples, variant: str,
                        base_resolution: int,
                        estimator: Optional[LightingEstimator]) -> float:
    """Mean squared error of the albedo decoder against exact albedo."""
    was_training = model.training
    model.train_mode(False)
    errs = []
    try:
        for item in samples:
            if variant == "one_to_one":
                sample = item
                from .models import normals_dot_light, _forward_numpy  # local to avoid cycle
                args = dict(
                    rgb=Tensor(to_chw(sample.input_image)[None]),
                    depth=Tensor(to_chw(sample.depth)[None]),
                )
                if not model.no_normals:
                    ndir = normals_dot_light(sample.normals, sample.target_light)
                    args["normals_dot"] = Tensor(to_chw(ndir)[None])
                bundle = model.forward(**args)
                gt = sample.albedo
            else:
                triplet = item
                guide = Tensor(to_chw(triplet.guide.input_image)[None])
                bundle = model.forward(
                    rgb=Tensor(to_chw(triplet.input.input_image)[None]),
                    depth=Tensor(to_chw(triplet.input.depth)[None]),
                    guide_rgb=guide,
                    guide_depth=Tensor(to_chw(triplet.guide.depth)[None]),
                    guide_features=estimator.forward_features(guide).feature_map)
                gt = triplet.input.albedo
            pred = bundle.albedo.data[0].transpose(1, 2, 0).astype(np.float64)
            errs.append(float(((pred - gt) ** 2).mean()))
    finally:
        model.train_mode(was_training)
    return float(np.mean(errs))


ABLATION_MATRIX = {
    "one_to_one": [
        ("full", {}),
        ("no_normals", {"no_normals": True}),
        ("no_lighting_loss", {"no_lighting_loss": True}),
    ],
    "any_to_any": [
        ("full", {}),
        ("no_multiscale", {"no_multiscale": True}),
        ("no_lighting_loss", {"no_lighting_loss": True}),
    ],
}


def run_ablation(cfg: RunConfig, out_dir, seeds=(7, 8, 9),
                 max_train: Optional[int] = None,
                 max_val: Optional[int] = None) -> dict:
    """Train the full/ablated configurations for both variants over the
    given seeds and tabulate validation metrics.

    Data is fixed per track (it depends only on the config seed), so runs
    differ only in the ablation and the training seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "resolved_config.json")
    estimator, est_report = pretrain_estimator(cfg)
    rows = []
    results: dict = {}
    for variant in ("one_to_one", "any_to_any"):
        for name, flags in ABLATION_MATRIX[variant]:
            for seed in seeds:
                run_cfg = replace(cfg, model=replace(cfg.model, variant=variant, **flags))
                run_dir = out_dir / f"{variant}.{name}.seed{seed}"
                summary = run_training(run_cfg, run_dir, estimator=estimator,
                                       train_seed=seed, max_train=max_train,
                                       max_val=max_val,
                                       keep_epoch_checkpoints=False)
                final = summary["final"]
                rows.append((variant, name, seed, final["psnr"], final["ssim"],
                             final["proxy_lpips"], final["mps"]))
                results[(variant, name, seed)] = final
    csv = ["track,config,seed,psnr_db,ssim,proxy_lpips,mps"]
    for r in rows:
        csv.append(",".join(str(v) if i < 3 else repr(v) for i, v in enumerate(r)))
    wins = {}
    for variant in ("one_to_one", "any_to_any"):
        for name, _ in ABLATION_MATRIX[variant][1:]:
            count = sum(
                1 for seed in seeds
                if results[(variant, "full", seed)]["psnr"] >= results[(variant, name, seed)]["psnr"])
            wins[f"{variant}.full_vs_{name}"] = count
    table = {
        "rows": [dict(zip(("track", "config", "seed", "psnr", "ssim",
                           "proxy_lpips", "mps"), r)) for r in rows],
        "full_wins": wins,
        "n_seeds": len(seeds),
        "estimator_accuracy_direction": est_report.accuracy_direction,
        "estimator_accuracy_color": est_report.accuracy_color,
    }
    (out_dir / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return table
