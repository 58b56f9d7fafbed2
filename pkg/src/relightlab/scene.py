"""Procedural Lambertian scene renderer with exact ground truth.

A scene is a seeded heightfield (a sum of smooth radial bumps) carrying a
piecewise-constant Voronoi albedo.  Images follow the diffuse rendering
rule image = albedo * shading, where shading combines the light color
with the cosine falloff between the surface normal and the light
direction, an ambient floor, and optional hard shadows found by
ray-marching the heightfield.  Every quantity the training losses
reference (albedo, shading, depth, normals) is therefore available
exactly, and generation is bit-reproducible from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .imutil import bilinear_resize

__all__ = [
    "KELVIN_GRID",
    "N_DIRECTIONS",
    "N_COLORS",
    "ELEVATION_RAD",
    "LightSetting",
    "SceneSpec",
    "SceneGeometry",
    "RenderedSample",
    "GuideTriplet",
    "AnyToAnySet",
    "bump_field",
    "gen_scene",
    "depth_to_normals",
    "kelvin_to_rgb",
    "render_shading",
    "shading_geometry",
    "compose",
    "make_one_to_one_set",
    "make_any_to_any_set",
]

KELVIN_GRID = (2500.0, 3500.0, 4500.0, 5500.0, 6500.0)
N_DIRECTIONS = 8
N_COLORS = 5
# all light directions share a 45-degree elevation
ELEVATION_RAD = math.pi / 4.0

VALID_RESOLUTIONS = (64, 128, 256, 384, 1024)


@dataclass(frozen=True)
class LightSetting:
    """Discrete light class (direction octant, color temperature) with its
    continuous realization."""

    direction_index: int
    color_index: int
    azimuth: float
    elevation: float
    kelvin: float
    omega: tuple[float, float, float]

    @classmethod
    def from_indices(cls, direction_index: int, color_index: int) -> "LightSetting":
        if not 0 <= direction_index < N_DIRECTIONS:
            raise ValueError(f"direction_index {direction_index} outside [0, {N_DIRECTIONS})")
        if not 0 <= color_index < N_COLORS:
            raise ValueError(f"color_index {color_index} outside [0, {N_COLORS})")
        azimuth = direction_index * math.pi / 4.0
        elevation = ELEVATION_RAD
        omega = (
            math.cos(azimuth) * math.cos(elevation),
            math.sin(azimuth) * math.cos(elevation),
            math.sin(elevation),
        )
        norm = math.sqrt(sum(v * v for v in omega))
        omega = tuple(v / norm for v in omega)
        return cls(direction_index, color_index, azimuth, elevation,
                   KELVIN_GRID[color_index], omega)

    @property
    def rgb(self) -> np.ndarray:
        return kelvin_to_rgb(self.kelvin)

    def key(self) -> tuple[int, int]:
        return (self.direction_index, self.color_index)


def all_light_settings() -> list[LightSetting]:
    """The full 8x5 direction/color cross product, no duplicates."""
    return [LightSetting.from_indices(d, c)
            for d in range(N_DIRECTIONS) for c in range(N_COLORS)]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    resolution: int = 64
    bump_count: int = 5
    albedo_regions: int = 6
    shadows_enabled: bool = True
    ambient: float = 0.05
    z_gain: float = 1.0
    albedo_noise: float = 0.02

    def __post_init__(self):
        if self.resolution not in VALID_RESOLUTIONS:
            raise ValueError(f"resolution {self.resolution} not in {VALID_RESOLUTIONS}")
        if self.bump_count < 1:
            raise ValueError("bump_count must be >= 1")
        if self.albedo_regions < 1:
            raise ValueError("albedo_regions must be >= 1")
        if not 0.0 <= self.ambient <= 0.2:
            raise ValueError("ambient must lie in [0, 0.2]")
        if self.z_gain <= 0:
            raise ValueError("z_gain must be positive")


def bump_field(resolution: int, centers: np.ndarray, sigmas: np.ndarray,
               amps: np.ndarray) -> np.ndarray:
    """Sum of Gaussian bumps sampled on the unit-square pixel grid (float64)."""
    coords = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    h = np.zeros((resolution, resolution), dtype=np.float64)
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        h += a * np.exp(-r2 / (2.0 * s * s))
    return h


def gen_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (heightfield in [0,1], albedo image in (0,1)) pair."""
    res = spec.resolution
    gb = rng_mod.stream(spec.seed, "scene.bumps")
    centers = gb.uniform(0.1, 0.9, size=(spec.bump_count, 2))
    sigmas = gb.uniform(0.08, 0.25, size=spec.bump_count)
    amps = gb.uniform(0.4, 1.0, size=spec.bump_count)
    h = bump_field(res, centers, sigmas, amps)
    hmin, hmax = h.min(), h.max()
    height = ((h - hmin) / max(hmax - hmin, 1e-12)).astype(np.float32)

    ga = rng_mod.stream(spec.seed, "scene.albedo")
    sites = ga.uniform(0.0, 1.0, size=(spec.albedo_regions, 2))
    colors = ga.uniform(0.2, 0.95, size=(spec.albedo_regions, 3)).astype(np.float32)
    coords = (np.arange(res) + 0.5) / res
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    d2 = (xx[..., None] - sites[:, 1]) ** 2 + (yy[..., None] - sites[:, 0]) ** 2
    region = np.argmin(d2, axis=-1)
    albedo = colors[region]
    if spec.albedo_noise > 0:
        coarse = ga.uniform(-1.0, 1.0, size=(max(res // 8, 2), max(res // 8, 2)))
        noise = bilinear_resize(coarse, res, res).astype(np.float32)
        albedo = albedo + spec.albedo_noise * noise[..., None]
    return height, np.clip(albedo, 0.02, 0.98).astype(np.float32)


def depth_to_normals(depth: np.ndarray, z_gain: float) -> np.ndarray:
    """Unit normals from a depth map via central differences.

    Derivatives are taken on the unit square (pixel spacing 1/N) with
    replicated borders; n = normalize(-z_gain*dd/dx, -z_gain*dd/dy, 1).
    """
    if z_gain <= 0:
        raise ValueError("z_gain must be positive")
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    padded = np.pad(d, 1, mode="edge")
    ddx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / (2.0 / w)
    ddy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / (2.0 / h)
    n = np.stack([-z_gain * ddx, -z_gain * ddy, np.ones_like(d)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n.astype(np.float32)


def kelvin_to_rgb(kelvin: float) -> np.ndarray:
    """Blackbody color from a Planckian-locus polynomial fit, scaled so the
    largest channel equals 1."""
    if not 1000.0 <= kelvin <= 12000.0:
        raise ValueError(f"kelvin {kelvin} outside [1000, 12000]")
    t = kelvin / 100.0
    if t <= 66.0:
        r = 255.0
        g = 99.4708025861 * math.log(t) - 161.1195681661
    else:
        r = 329.698727446 * (t - 60.0) ** -0.1332047592
        g = 288.1221695283 * (t - 60.0) ** -0.0755148492
    if t >= 66.0:
        b = 255.0
    elif t <= 19.0:
        b = 0.0
    else:
        b = 138.5177312231 * math.log(t - 10.0) - 305.0447927307
    rgb = np.array([r, g, b], dtype=np.float64)
    rgb = np.clip(rgb, 0.0, 255.0)
    rgb /= rgb.max()
    return rgb.astype(np.float32)


def _shadow_mask(height: np.ndarray, omega, z_gain: float) -> np.ndarray:
    """1.0 where the light is visible, 0.0 where the heightfield blocks it.

    Marches one-pixel steps toward the light, sampling the nearest texel;
    rays exit at the image border.
    """
    h, w = height.shape
    ox, oy, oz = omega
    hyp = math.hypot(ox, oy)
    if hyp < 1e-9:
        return np.ones((h, w), dtype=np.float32)
    ux, uy = ox / hyp, oy / hyp
    dz = (oz / hyp) / w  # world z rise per one-pixel horizontal step
    surface = z_gain * height.astype(np.float64)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    act_r = rows.reshape(-1).astype(np.float64)
    act_c = cols.reshape(-1).astype(np.float64)
    act_z = surface.reshape(-1).copy()
    act_idx = np.arange(h * w)
    blocked = np.zeros(h * w, dtype=bool)
    bias = 1e-4 * z_gain
    max_steps = int(math.hypot(h, w)) + 2
    for _ in range(max_steps):
        if act_idx.size == 0:
            break
        act_r = act_r + uy
        act_c = act_c + ux
        act_z = act_z + dz
        ri = np.rint(act_r).astype(np.intp)
        ci = np.rint(act_c).astype(np.intp)
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        if not inside.any():
            break
        hit = np.zeros(act_idx.size, dtype=bool)
        hit[inside] = surface[ri[inside], ci[inside]] > act_z[inside] + bias
        blocked[act_idx[hit]] = True
        keep = inside & ~hit
        act_r, act_c, act_z, act_idx = act_r[keep], act_c[keep], act_z[keep], act_idx[keep]
    return np.where(blocked.reshape(h, w), 0.0, 1.0).astype(np.float32)


def shading_geometry(normals: np.ndarray, light: LightSetting,
                     heightfield: Optional[np.ndarray], shadows: bool,
                     ambient: float, z_gain: float = 1.0) -> np.ndarray:
    """Scalar per-pixel illumination: ambient + (1-ambient)*cos+*occlusion."""
    if not 0.0 <= ambient <= 0.2:
        raise ValueError("ambient must lie in [0, 0.2]")
    omega = np.asarray(light.omega, dtype=np.float64)
    cos = np.maximum(normals.astype(np.float64) @ omega, 0.0)
    if shadows:
        if heightfield is None:
            raise ValueError("shadows need the heightfield")
        occ = _shadow_mask(heightfield, light.omega, z_gain).astype(np.float64)
    else:
        occ = 1.0
    return (ambient + (1.0 - ambient) * cos * occ).astype(np.float32)


def render_shading(normals: np.ndarray, light: LightSetting,
                   heightfield: Optional[np.ndarray], shadows: bool,
                   ambient: float, z_gain: float = 1.0) -> np.ndarray:
    """Shading image: light color modulated by the geometric term."""
    geom = shading_geometry(normals, light, heightfield, shadows, ambient, z_gain)
    return geom[..., None] * light.rgb[None, None, :]


def compose(albedo: np.ndarray, shading: np.ndarray) -> np.ndarray:
    """image = albedo * shading, clamped to [0, 1]."""
    if albedo.shape != shading.shape:
        raise ValueError(f"compose shape mismatch: {albedo.shape} vs {shading.shape}")
    return np.clip(albedo * shading, 0.0, 1.0)


class SceneGeometry:
    """Light-independent scene data with per-direction shading caches."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.heightfield, self.albedo = gen_scene(spec)
        self.depth = (1.0 - self.heightfield).astype(np.float32)
        self.normals = depth_to_normals(self.depth, spec.z_gain)
        self._geom_cache: dict[int, np.ndarray] = {}

    def geometry_term(self, light: LightSetting) -> np.ndarray:
        cached = self._geom_cache.get(light.direction_index)
        if cached is None:
            cached = shading_geometry(self.normals, light, self.heightfield,
                                      self.spec.shadows_enabled, self.spec.ambient,
                                      self.spec.z_gain)
            self._geom_cache[light.direction_index] = cached
        return cached

    def shading(self, light: LightSetting) -> np.ndarray:
        return self.geometry_term(light)[..., None] * light.rgb[None, None, :]

    def image(self, light: LightSetting) -> np.ndarray:
        return compose(self.albedo, self.shading(light))


@dataclass
class RenderedSample:
    """One synthetic sample; target fields are None for grid samples that
    only serve as guides."""

    input_image: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    shading: np.ndarray
    input_light: LightSetting
    scene_seed: int
    scene_index: int
    target_image: Optional[np.ndarray] = None
    target_shading: Optional[np.ndarray] = None
    target_light: Optional[LightSetting] = None


def scene_seed_for(master_seed: int, index: int) -> int:
    return rng_mod.derive_key(master_seed, f"scene:{index}") % (2 ** 63)


def make_one_to_one_set(n_scenes: int, from_light: LightSetting,
                        to_light: LightSetting, seed: int,
                        template: Optional[SceneSpec] = None) -> list[RenderedSample]:
    """Fixed-illumination pairs: every input under `from_light`, every
    target the same scene under `to_light`."""
    if from_light.key() == to_light.key():
        raise ValueError("from_light and to_light must differ")
    if template is None:
        template = SceneSpec(seed=0)
    samples = []
    for i in range(n_scenes):
        sseed = scene_seed_for(seed, i)
        geo = SceneGeometry(replace(template, seed=sseed))
        samples.append(RenderedSample(
            input_image=geo.image(from_light),
            depth=geo.depth,
            normals=geo.normals,
            albedo=geo.albedo,
            shading=geo.shading(from_light),
            input_light=from_light,
            scene_seed=sseed,
            scene_index=i,
            target_image=geo.image(to_light),
            target_shading=geo.shading(to_light),
            target_light=to_light,
        ))
    return samples


class GuideTriplet:
    """Input sample, a guide from a different scene, and the input scene
    re-rendered under the guide's light.  Pixels render lazily."""

    __slots__ = ("_set", "input_ref", "guide_ref")

    def __init__(self, owner: "AnyToAnySet", input_ref, guide_ref):
        self._set = owner
        self.input_ref = input_ref  # (scene_index, direction_index, color_index)
        self.guide_ref = guide_ref

    @property
    def target_ref(self):
        return (self.input_ref[0], self.guide_ref[1], self.guide_ref[2])

    @property
    def input(self) -> RenderedSample:
        return self._set.sample(*self.input_ref)

    @property
    def guide(self) -> RenderedSample:
        return self._set.sample(*self.guide_ref)

    @property
    def target(self) -> RenderedSample:
        return self._set.sample(*self.target_ref)


class AnyToAnySet(Sequence):
    """Lazy any-to-any training set over an n_scenes x 8 x 5 sample grid."""

    def __init__(self, n_scenes: int, guides_per_sample: int, seed: int,
                 template: Optional[SceneSpec] = None):
        if n_scenes < 2:
            raise ValueError("any-to-any needs at least 2 scenes")
        if template is None:
            template = SceneSpec(seed=0)
        self.n_scenes = n_scenes
        self.template = template
        self.seed = seed
        self.scene_seeds = [scene_seed_for(seed, i) for i in range(n_scenes)]
        self.base_refs = [(s, d, c) for s in range(n_scenes)
                          for d in range(N_DIRECTIONS) for c in range(N_COLORS)]
        gen = rng_mod.stream(seed, "anytoany.guides")
        refs = []
        for base in self.base_refs:
            for _ in range(guides_per_sample):
                other = int(gen.integers(0, n_scenes - 1))
                if other >= base[0]:
                    other += 1
                gd = int(gen.integers(0, N_DIRECTIONS))
                gc = int(gen.integers(0, N_COLORS))
                refs.append((base, (other, gd, gc)))
        self._refs = refs
        self._geos: dict[int, SceneGeometry] = {}

    def __len__(self) -> int:
        return len(self._refs)

    def __getitem__(self, i) -> GuideTriplet:
        base, guide = self._refs[i]
        return GuideTriplet(self, base, guide)

    def geometry(self, scene_index: int) -> SceneGeometry:
        geo = self._geos.get(scene_index)
        if geo is None:
            geo = SceneGeometry(replace(self.template, seed=self.scene_seeds[scene_index]))
            self._geos[scene_index] = geo
        return geo

    def sample(self, scene_index: int, direction_index: int, color_index: int) -> RenderedSample:
        geo = self.geometry(scene_index)
        light = LightSetting.from_indices(direction_index, color_index)
        return RenderedSample(
            input_image=geo.image(light),
            depth=geo.depth,
            normals=geo.normals,
            albedo=geo.albedo,
            shading=geo.shading(light),
            input_light=light,
            scene_seed=self.scene_seeds[scene_index],
            scene_index=scene_index,
        )


def make_any_to_any_set(n_scenes: int, guides_per_sample: int = 3, seed: int = 0,
                        template: Optional[SceneSpec] = None) -> AnyToAnySet:
    return AnyToAnySet(n_scenes, guides_per_sample, seed, template)
