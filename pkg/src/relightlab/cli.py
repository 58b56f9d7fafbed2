"""Command-line entry point.

Subcommands: synth, pretrain-lighting, train, eval, relight, gradcheck,
metrics, ablate.  Exit codes: 0 success, 1 runtime failure, 2 usage
error.  RELIGHTLAB_THREADS caps worker threads for scene synthesis.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset_io
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config
from .imutil import from_chw
from .losses import compute_report, mean_report, metric_csv_rows
from .models import ensemble_infer, normals_dot_light, resize_infer, _forward_numpy
from .pipeline import (lights_from_config, load_estimator, model_from_checkpoint,
                       pretrain_estimator, run_ablation, run_training,
                       save_estimator, scene_template)
from .scene import LightSetting, all_light_settings, depth_to_normals
from .train import evaluate_split
from .verify import OP_TOLERANCE, op_gradchecks


def _load_cfg(path) -> RunConfig:
    return load_config(path)


def cmd_synth(args) -> int:
    cfg = _load_cfg(args.config)
    out = Path(args.out)
    from_light, to_light = lights_from_config(cfg)
    if args.track == "one_to_one":
        lights = [from_light, to_light]
    else:
        lights = all_light_settings()
    manifest = dataset_io.write_dataset(
        out, scene_template(cfg), cfg.scene.n_train_scenes, cfg.seed, lights,
        shading_light=from_light)
    dump_config(cfg, out / "resolved_config.json")
    print(f"wrote {len(manifest['scenes'])} scenes x {len(lights)} lights to {out}")
    return 0


def cmd_pretrain_lighting(args) -> int:
    cfg = _load_cfg(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    estimator, report = pretrain_estimator(cfg)
    save_estimator(out / "estimator.rlft", estimator, report, cfg)
    dump_config(cfg, out / "resolved_config.json")
    payload = {"accuracy_direction": report.accuracy_direction,
               "accuracy_color": report.accuracy_color,
               "epoch_losses": report.epoch_losses}
    (out / "pretrain_report.json").write_text(json.dumps(payload, indent=1) + "\n")
    print(f"direction accuracy {report.accuracy_direction:.3f}, "
          f"color accuracy {report.accuracy_color:.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    estimator = load_estimator(args.estimator) if args.estimator else None
    summary = run_training(cfg, args.out, estimator=estimator)
    final = summary["final"]
    print(f"final val: psnr {final['psnr']:.2f} dB, ssim {final['ssim']:.4f}, "
          f"mps {final['mps']:.4f} (checkpoint {summary['checkpoint']})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    from .pipeline import build_any_to_any_data, build_one_to_one_data
    model, meta = model_from_checkpoint(args.checkpoint)
    estimator = load_estimator(args.estimator) if args.estimator else None
    if estimator is None:
        raise ConfigError("eval needs --estimator for the proxy perceptual metric")
    variant = meta["variant"]
    if variant == "one_to_one":
        _, val, _, _ = build_one_to_one_data(cfg)
    else:
        _, val = build_any_to_any_data(cfg, max_val=args.max_val)
    report, per_sample = evaluate_split(model, val, cfg.eval.protocol, variant,
                                        int(meta["base_resolution"]),
                                        estimator=estimator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = metric_csv_rows([(f"val_{i:04d}", r) for i, r in enumerate(per_sample)]
                           + [("mean", report)])
    (out / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    dump_config(cfg, out / "resolved_config.json")
    print(f"mean: psnr {report.psnr:.2f} dB, ssim {report.ssim:.4f}, "
          f"proxy_lpips {report.proxy_lpips:.4f}, mps {report.mps:.4f}")
    return 0


def cmd_relight(args) -> int:
    model, meta = model_from_checkpoint(args.checkpoint)
    estimator = load_estimator(args.estimator) if args.estimator else None
    rgb = dataset_io.load_rgb8(args.input)
    depth = dataset_io.load_gray16(args.depth)
    base_res = int(meta["base_resolution"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if meta["variant"] == "one_to_one":
        tl = meta.get("to_light")
        light = LightSetting.from_indices(tl["direction_index"], tl["color_index"]) \
            if tl else LightSetting.from_indices(0, 2)
        normals = depth_to_normals(depth, args.z_gain)
        ndir = normals_dot_light(normals, light)
        if args.ensemble:
            fused = ensemble_infer(model, rgb, depth, ndir, base_res,
                                   estimator=estimator)
        else:
            fused = _forward_numpy(model, estimator, rgb, depth, ndir, None, None)
    else:
        if not args.guide or not args.guide_depth:
            print("error: any_to_any relighting needs --guide and --guide-depth",
                  file=sys.stderr)
            return 1
        if estimator is None:
            print("error: any_to_any relighting needs --estimator", file=sys.stderr)
            return 1
        guide = dataset_io.load_rgb8(args.guide)
        guide_depth = dataset_io.load_gray16(args.guide_depth)
        fused = resize_infer(model, rgb, depth, base_res, estimator=estimator,
                             guide_rgb=guide, guide_depth=guide_depth)
    dataset_io.save_rgb8(out / "fused.png", np.clip(fused, 0.0, 1.0))
    if args.dump_intermediates:
        _dump_intermediates(model, estimator, meta, rgb, depth, args, out)
    print(f"wrote {out / 'fused.png'} ({fused.shape[1]}x{fused.shape[0]})")
    return 0


def _dump_intermediates(model, estimator, meta, rgb, depth, args, out: Path) -> None:
    from PIL import Image
    from .autograd import Tensor
    from .imutil import to_chw
    kwargs = dict(rgb=Tensor(to_chw(rgb)[None]), depth=Tensor(to_chw(depth)[None]))
    if meta["variant"] == "one_to_one":
        tl = meta.get("to_light")
        light = LightSetting.from_indices(tl["direction_index"], tl["color_index"]) \
            if tl else LightSetting.from_indices(0, 2)
        normals = depth_to_normals(depth, args.z_gain)
        if not model.no_normals:
            kwargs["normals_dot"] = Tensor(to_chw(normals_dot_light(normals, light))[None])
    else:
        guide = dataset_io.load_rgb8(args.guide)
        gt = Tensor(to_chw(guide)[None])
        kwargs["guide_rgb"] = gt
        kwargs["guide_depth"] = Tensor(to_chw(dataset_io.load_gray16(args.guide_depth))[None])
        kwargs["guide_features"] = estimator.forward_features(gt).feature_map
    bundle = model.forward(**kwargs)
    dataset_io.save_rgb8(out / "albedo.png", np.clip(from_chw(bundle.albedo.data[0]), 0, 1))
    dataset_io.save_rgb8(out / "shading.png", np.clip(from_chw(bundle.shading.data[0]), 0, 1))
    w = np.clip(bundle.weight.data[0, 0], 0.0, 1.0)
    Image.fromarray(np.rint(w * 255.0).astype(np.uint8), mode="L").save(out / "weight.png")


def cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    results: dict[str, float] = {}
    for seed in range(args.seeds):
        for name, err in op_gradchecks(seed).items():
            results[name] = max(results.get(name, 0.0), err)
    print(f"{'operation':34s} max_rel_err")
    ok = True
    for name, err in sorted(results.items()):
        status = "ok" if err < OP_TOLERANCE else "FAIL"
        print(f"{name:34s} {err:.3e}  {status}")
        worst_overall = max(worst_overall, err)
        ok = ok and err < OP_TOLERANCE
    print(f"worst: {worst_overall:.3e} (tolerance {OP_TOLERANCE:.0e})")
    return 0 if ok else 1


def cmd_metrics(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        print(f"error: no PNG files in {pred_dir}", file=sys.stderr)
        return 1
    external = {}
    if args.lpips_csv:
        for line in Path(args.lpips_csv).read_text().splitlines()[1:]:
            sample_id, value = line.split(",")[:2]
            external[sample_id] = float(value)
    estimator = load_estimator(args.estimator) if args.estimator else None
    if estimator is None and not external:
        print("error: metrics needs --estimator or --lpips-csv", file=sys.stderr)
        return 1
    reports = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            print(f"error: missing ground truth for {name}", file=sys.stderr)
            return 1
        pred = dataset_io.load_rgb8(pred_dir / name)
        gt = dataset_io.load_rgb8(gt_path)
        sample_id = Path(name).stem
        reports.append((sample_id, compute_report(
            pred, gt, estimator, lpips_value=external.get(sample_id))))
    rows = metric_csv_rows(reports + [("mean", mean_report([r for _, r in reports]))])
    Path(args.csv).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print("\n".join(rows))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = run_ablation(cfg, args.out, seeds=seeds, max_train=args.max_train,
                         max_val=args.max_val)
    print("track,config,seed,psnr_db,ssim,proxy_lpips,mps")
    for row in table["rows"]:
        print(f"{row['track']},{row['config']},{row['seed']},"
              f"{row['psnr']:.3f},{row['ssim']:.4f},{row['proxy_lpips']:.4f},{row['mps']:.4f}")
    for key, wins in table["full_wins"].items():
        print(f"{key}: full >= ablation in {wins}/{table['n_seeds']} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relightlab",
                                description="dense-fusion relighting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset to a directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--track", choices=("one_to_one", "any_to_any"),
                   default="one_to_one")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-lighting", help="train and save the light classifier")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_lighting)

    s = sub.add_parser("train", help="train a relighting model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--estimator", help="existing estimator checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a validation split")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--estimator", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-val", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("relight", help="relight one image with a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--guide")
    s.add_argument("--guide-depth")
    s.add_argument("--estimator")
    s.add_argument("--ensemble", action="store_true")
    s.add_argument("--dump-intermediates", action="store_true")
    s.add_argument("--z-gain", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("metrics", help="PSNR/SSIM/proxy-LPIPS/MPS for image pairs")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--estimator")
    s.add_argument("--lpips-csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("ablate", help="run the ablation matrix and tabulate results")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default="7,8,9")
    s.add_argument("--max-train", type=int, default=None)
    s.add_argument("--max-val", type=int, default=None)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
