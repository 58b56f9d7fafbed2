import math

import numpy as np
import pytest

from relightlab.scene import (ELEVATION_RAD, KELVIN_GRID, LightSetting,
                              SceneGeometry, SceneSpec, all_light_settings,
                              bump_field, compose, depth_to_normals, gen_scene,
                              kelvin_to_rgb, make_any_to_any_set,
                              make_one_to_one_set, render_shading,
                              shading_geometry)


class TestGenScene:
    def test_deterministic(self):
        spec = SceneSpec(seed=123, resolution=64)
        h1, a1 = gen_scene(spec)
        h2, a2 = gen_scene(spec)
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(a1, a2)

    def test_single_bump_argmax_reproducible(self):
        spec = SceneSpec(seed=7, resolution=64, bump_count=1)
        h1, _ = gen_scene(spec)
        h2, _ = gen_scene(spec)
        assert h1.argmax() == h2.argmax()
        # a single radial bump has one smooth maximum: the top-8 locations
        # must be mutually adjacent
        idx = np.argsort(h1.ravel())[-8:]
        rows, cols = np.unravel_index(idx, h1.shape)
        assert rows.max() - rows.min() <= 2 and cols.max() - cols.min() <= 2

    def test_albedo_mode_count_matches_regions(self):
        """Histogram-peak oracle: with zero texture noise, the red-channel
        histogram has (about) one mode per reflectance region."""
        regions = 5
        spec = SceneSpec(seed=11, resolution=128, albedo_regions=regions,
                         albedo_noise=0.0)
        _, albedo = gen_scene(spec)
        values = np.unique(np.round(albedo[..., 0], 6))
        assert regions - 1 <= len(values) <= regions

    def test_ranges(self):
        h, a = gen_scene(SceneSpec(seed=3, resolution=64))
        assert h.min() == 0.0 and h.max() == pytest.approx(1.0)
        assert a.min() >= 0.02 and a.max() <= 0.98


class TestNormals:
    def test_flat_depth(self):
        n = depth_to_normals(np.full((8, 8), 0.4, dtype=np.float32), z_gain=1.0)
        np.testing.assert_allclose(n, np.broadcast_to([0.0, 0.0, 1.0], (8, 8, 3)),
                                   atol=1e-7)

    def test_x_ramp(self):
        w = 16
        slope = 0.5  # per unit x
        cols = (np.arange(w) + 0.5) / w
        depth = np.tile(cols * slope, (w, 1)).astype(np.float32)
        n = depth_to_normals(depth, z_gain=1.0)
        expect = np.array([-slope, 0.0, 1.0])
        expect = expect / np.linalg.norm(expect)
        np.testing.assert_allclose(n[4:-4, 4:-4], np.broadcast_to(expect, (8, 8, 3)),
                                   atol=1e-5)

    def test_unit_norm(self):
        geo = SceneGeometry(SceneSpec(seed=5, resolution=64))
        norms = np.linalg.norm(geo.normals.astype(np.float64), axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_analytic_gradient_oracle(self):
        """Central differences vs the closed-form bump-sum derivative."""
        res = 256
        rng = np.random.default_rng(21)
        centers = rng.uniform(0.25, 0.75, (3, 2))
        sigmas = rng.uniform(0.2, 0.3, 3)
        amps = rng.uniform(0.4, 0.8, 3)
        h = bump_field(res, centers, sigmas, amps)
        depth = (1.0 - h).astype(np.float64)
        n = depth_to_normals(depth, z_gain=1.0).astype(np.float64)
        coords = (np.arange(res) + 0.5) / res
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        dh_dx = np.zeros((res, res))
        dh_dy = np.zeros((res, res))
        for (cy, cx), s, a in zip(centers, sigmas, amps):
            g = a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
            dh_dx += g * -(xx - cx) / (s * s)
            dh_dy += g * -(yy - cy) / (s * s)
        # depth = 1 - h, so dd/dx = -dh/dx
        expect = np.stack([dh_dx, dh_dy, np.ones_like(dh_dx)], axis=-1)
        expect /= np.linalg.norm(expect, axis=-1, keepdims=True)
        interior = (slice(2, -2), slice(2, -2))
        assert np.abs(n[interior] - expect[interior]).max() < 1e-3


class TestKelvin:
    def test_6500_near_white(self):
        assert kelvin_to_rgb(6500.0).min() >= 0.9

    def test_2500_warm(self):
        rgb = kelvin_to_rgb(2500.0)
        assert rgb[0] == pytest.approx(1.0)
        assert rgb[2] < 0.5

    def test_blue_red_ratio_monotone(self):
        ratios = [kelvin_to_rgb(k)[2] / kelvin_to_rgb(k)[0] for k in KELVIN_GRID]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            kelvin_to_rgb(500.0)
        with pytest.raises(ValueError):
            kelvin_to_rgb(20000.0)


class TestLightSetting:
    def test_label_round_trip(self):
        for d in range(8):
            for c in range(5):
                l = LightSetting.from_indices(d, c)
                assert l.azimuth == d * math.pi / 4.0
                assert l.kelvin == KELVIN_GRID[c]
                assert np.linalg.norm(l.omega) == pytest.approx(1.0, abs=1e-6)
                assert l.elevation == ELEVATION_RAD

    def test_full_grid_no_duplicates(self):
        settings = all_light_settings()
        assert len(settings) == 40
        assert len({s.key() for s in settings}) == 40

    def test_bad_indices_rejected(self):
        with pytest.raises(ValueError):
            LightSetting.from_indices(8, 0)
        with pytest.raises(ValueError):
            LightSetting.from_indices(0, 5)


class TestShading:
    def test_normal_equals_omega(self):
        light = LightSetting.from_indices(3, 2)
        n = np.broadcast_to(np.array(light.omega, dtype=np.float32), (4, 4, 3)).copy()
        s = render_shading(n, light, None, shadows=False, ambient=0.0)
        np.testing.assert_allclose(s, np.broadcast_to(light.rgb, (4, 4, 3)), atol=1e-6)

    def test_perpendicular_gets_ambient_only(self):
        light = LightSetting.from_indices(0, 2)
        # omega = (cos45, 0, sin45); a vector perpendicular to it
        perp = np.array([-light.omega[2], 0.0, light.omega[0]], dtype=np.float32)
        n = np.broadcast_to(perp, (4, 4, 3)).copy()
        s = render_shading(n, light, None, shadows=False, ambient=0.05)
        np.testing.assert_allclose(s, 0.05 * np.broadcast_to(light.rgb, (4, 4, 3)),
                                   atol=1e-6)

    def test_shadow_against_bruteforce_rays(self):
        """Vectorized march agrees with a per-pixel pure-Python ray walk."""
        spec = SceneSpec(seed=31, resolution=64)
        geo = SceneGeometry(spec)
        light = LightSetting.from_indices(2, 2)
        geom = shading_geometry(geo.normals, light, geo.heightfield, True,
                                ambient=0.0, z_gain=spec.z_gain)
        cos = np.maximum(geo.normals.astype(np.float64) @ np.asarray(light.omega), 0.0)
        with np.errstate(invalid="ignore"):
            occ = np.where(cos > 0, geom / np.where(cos == 0, 1, cos), 1.0)
        h, w = geo.heightfield.shape
        ox, oy, oz = light.omega
        hyp = math.hypot(ox, oy)
        ux, uy = ox / hyp, oy / hyp
        dz = (oz / hyp) / w
        surface = spec.z_gain * geo.heightfield.astype(np.float64)
        rng = np.random.default_rng(0)
        for _ in range(300):
            r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
            if cos[r, c] == 0.0:
                continue  # cosine already zero; occlusion unobservable
            rr, cc, z = float(r), float(c), surface[r, c]
            blocked = False
            for _step in range(int(math.hypot(h, w)) + 2):
                rr += uy
                cc += ux
                z += dz
                ri, ci = int(round(rr)), int(round(cc))
                if not (0 <= ri < h and 0 <= ci < w):
                    break
                if surface[ri, ci] > z + 1e-4 * spec.z_gain:
                    blocked = True
                    break
            assert occ[r, c] == pytest.approx(0.0 if blocked else 1.0)

    def test_shading_bounds(self):
        spec = SceneSpec(seed=13, resolution=64)
        geo = SceneGeometry(spec)
        for d in range(0, 8, 3):
            light = LightSetting.from_indices(d, d % 5)
            s = geo.shading(light)
            rgb = light.rgb
            for ch in range(3):
                assert s[..., ch].min() >= spec.ambient * rgb[ch] - 1e-6
                assert s[..., ch].max() <= rgb[ch] + 1e-6


class TestCompose:
    def test_identity_albedo(self):
        s = np.random.default_rng(0).random((4, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(compose(np.ones_like(s), s), s)

    def test_zero_shading(self):
        a = np.random.default_rng(1).random((4, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(compose(a, np.zeros_like(a)), np.zeros_like(a))

    def test_product_bit_exact(self):
        rng = np.random.default_rng(2)
        a = rng.random((8, 8, 3)).astype(np.float32)
        s = rng.random((8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(compose(a, s), a * s)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compose(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))


class TestOneToOneSet:
    def test_pair_consistency(self):
        fr = LightSetting.from_indices(1, 4)
        to = LightSetting.from_indices(5, 1)
        samples = make_one_to_one_set(3, fr, to, seed=17,
                                      template=SceneSpec(seed=0, resolution=64))
        for s in samples:
            assert s.input_light.key() == fr.key()
            assert s.target_light.key() == to.key()
            # same scene: identical albedo and depth, bit-exact
            np.testing.assert_array_equal(
                s.input_image, np.clip(s.albedo * s.shading, 0, 1))
            np.testing.assert_array_equal(
                s.target_image, np.clip(s.albedo * s.target_shading, 0, 1))

    def test_identical_lights_rejected(self):
        l = LightSetting.from_indices(0, 0)
        with pytest.raises(ValueError):
            make_one_to_one_set(2, l, l, seed=0)

    def test_determinism_across_runs(self):
        fr = LightSetting.from_indices(0, 0)
        to = LightSetting.from_indices(4, 4)
        t = SceneSpec(seed=0, resolution=64)
        a = make_one_to_one_set(2, fr, to, seed=5, template=t)
        b = make_one_to_one_set(2, fr, to, seed=5, template=t)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.input_image, y.input_image)
            np.testing.assert_array_equal(x.target_image, y.target_image)


class TestAnyToAnySet:
    def test_counts_at_reference_size(self):
        aset = make_any_to_any_set(300, 3, seed=23)
        assert len(aset.base_refs) == 12000
        assert len(aset) == 36000

    def test_no_guide_from_same_scene(self):
        aset = make_any_to_any_set(300, 3, seed=23)
        assert all(base[0] != guide[0] for base, guide in aset._refs)

    def test_target_matches_guide_light(self):
        aset = make_any_to_any_set(4, 2, seed=29,
                                   template=SceneSpec(seed=0, resolution=64))
        t = aset[5]
        assert t.target.input_light.key() == t.guide.input_light.key()
        assert t.target.scene_index == t.input.scene_index
        assert t.guide.scene_seed != t.input.scene_seed

    def test_too_few_scenes_rejected(self):
        with pytest.raises(ValueError):
            make_any_to_any_set(1, 3, seed=0)

    def test_forty_settings_per_scene(self):
        aset = make_any_to_any_set(2, 1, seed=1)
        per_scene = {}
        for s, d, c in aset.base_refs:
            per_scene.setdefault(s, set()).add((d, c))
        assert all(len(v) == 40 for v in per_scene.values())
