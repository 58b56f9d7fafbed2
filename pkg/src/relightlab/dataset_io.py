"""PNG and manifest I/O for synthesized datasets.

Directory layout, one folder per scene:

    <root>/<scene_id>/<dir>_<color>.png   rendered image, 8-bit sRGB
    <root>/<scene_id>/depth.png           16-bit grayscale
    <root>/<scene_id>/normals.png         8-bit plane-encoded visualization
    <root>/<scene_id>/albedo.png          8-bit sRGB
    <root>/<scene_id>/shading.png         8-bit sRGB (light noted in manifest)
    <root>/manifest.json                  every sample with labels and seeds

The manifest records which light the per-scene shading.png corresponds
to, since shading depends on the light while the layout names one file.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .scene import (LightSetting, SceneGeometry, SceneSpec, scene_seed_for)

__all__ = [
    "save_rgb8",
    "load_rgb8",
    "save_gray16",
    "load_gray16",
    "encode_normals",
    "write_dataset",
    "load_manifest",
    "worker_threads",
]

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "relightlab-dataset"
FORMAT_VERSION = 1


def worker_threads() -> int:
    """Worker-thread cap from RELIGHTLAB_THREADS (default 1)."""
    raw = os.environ.get("RELIGHTLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def save_rgb8(path, img: np.ndarray) -> None:
    """Save an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def load_rgb8(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_gray16(path, img: np.ndarray) -> None:
    """Save an (H, W) float map in [0, 1] as 16-bit grayscale PNG."""
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path)


def load_gray16(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return arr / 65535.0


def encode_normals(normals: np.ndarray) -> np.ndarray:
    """Plane-aligned RGB visualization of a unit-normal map.

    Red encodes alignment with the x-y plane (|n_z|), green the y-z plane
    (|n_x|), blue the x-z plane (|n_y|).
    """
    n = np.abs(np.asarray(normals, dtype=np.float32))
    return np.stack([n[..., 2], n[..., 0], n[..., 1]], axis=-1)


def _scene_dir_name(index: int) -> str:
    return f"scene_{index:04d}"


def _write_scene(root: Path, index: int, spec: SceneSpec,
                 lights: list[LightSetting], shading_light: LightSetting) -> dict:
    geo = SceneGeometry(spec)
    sdir = root / _scene_dir_name(index)
    sdir.mkdir(parents=True, exist_ok=True)
    samples = []
    for light in lights:
        name = f"{light.direction_index}_{light.color_index}.png"
        save_rgb8(sdir / name, geo.image(light))
        samples.append({
            "file": name,
            "direction_index": light.direction_index,
            "color_index": light.color_index,
            "kelvin": light.kelvin,
        })
    save_gray16(sdir / "depth.png", geo.depth)
    save_rgb8(sdir / "normals.png", encode_normals(geo.normals))
    save_rgb8(sdir / "albedo.png", geo.albedo)
    save_rgb8(sdir / "shading.png", np.clip(geo.shading(shading_light), 0.0, 1.0))
    return {
        "id": _scene_dir_name(index),
        "seed": spec.seed,
        "samples": samples,
    }


def write_dataset(root, template: SceneSpec, n_scenes: int, seed: int,
                  lights: list[LightSetting],
                  shading_light: Optional[LightSetting] = None) -> dict:
    """Render `n_scenes` seeded scenes under `lights` and write the layout.

    Returns the manifest dict (also written to <root>/manifest.json).
    Scene rendering may run on worker threads; outputs are keyed by scene
    index so content is independent of the schedule.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if shading_light is None:
        shading_light = lights[0]
    specs = [replace(template, seed=scene_seed_for(seed, i)) for i in range(n_scenes)]
    threads = worker_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(
                lambda args: _write_scene(root, *args),
                [(i, specs[i], lights, shading_light) for i in range(n_scenes)],
            ))
    else:
        entries = [_write_scene(root, i, specs[i], lights, shading_light)
                   for i in range(n_scenes)]
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": seed,
        "resolution": template.resolution,
        "scene_template": asdict(replace(template, seed=0)),
        "shading_light": {
            "direction_index": shading_light.direction_index,
            "color_index": shading_light.color_index,
        },
        "scenes": entries,
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    with open(root / MANIFEST_NAME, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{root}: not a {FORMAT_NAME} directory")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported dataset version {manifest.get('version')}")
    return manifest
