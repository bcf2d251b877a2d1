"""Sparse grid structure, SH evaluation, sampling, prune/upsample, background."""

import numpy as np
import pytest

from perfield.grid import (EMPTY, BackgroundModel, background_radiance, dense_grid,
                           eval_color, grid_from_mask, interpolate_raw, make_background,
                           prune, sample_trilinear, sh_basis, upsample)
from perfield.renderer import RenderConfig, render_rays

from conftest import random_dirs, random_grid


class TestShBasis:
    def test_dc_is_constant(self, rng):
        for d in random_dirs(rng, 20):
            assert sh_basis(d)[0] == pytest.approx(0.2820948, abs=1e-7)

    def test_z_direction_kills_offaxis_degree_one(self):
        b = sh_basis(np.array([0.0, 0.0, 1.0]))
        assert b[1] == 0.0 and b[3] == 0.0
        assert b[2] != 0.0

    def test_monte_carlo_orthonormality(self):
        rng = np.random.default_rng(123)
        d = random_dirs(rng, 100_000)
        B = sh_basis(d)                       # (N, 9)
        gram = 4.0 * np.pi * (B.T @ B) / d.shape[0]
        assert np.abs(gram - np.eye(9)).max() < 1e-2

    def test_batch_matches_single(self, rng):
        d = random_dirs(rng, 5)
        batch = sh_basis(d)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], sh_basis(d[i]))


class TestEvalColor:
    def test_zero_coefficients_give_mid_gray(self, rng):
        for d in random_dirs(rng, 5):
            np.testing.assert_allclose(eval_color(np.zeros(27), d), [0.5, 0.5, 0.5])

    def test_dc_only_direction_independent(self, rng):
        sh = np.zeros(27)
        sh[0], sh[9], sh[18] = 1.5, -0.3, 0.8
        expected = 1.0 / (1.0 + np.exp(-np.array([1.5, -0.3, 0.8]) * 0.28209479177387814))
        for d in random_dirs(rng, 10):
            np.testing.assert_allclose(eval_color(sh, d), expected, atol=1e-12)

    def test_even_bands_invariant_under_flip(self, rng):
        sh = np.zeros(27)
        for ch in range(3):
            sh[ch * 9] = rng.normal()
            sh[ch * 9 + 4:ch * 9 + 9] = rng.normal(size=5)
        for d in random_dirs(rng, 10):
            np.testing.assert_allclose(eval_color(sh, d), eval_color(sh, -d), atol=1e-14)


def _scalar_trilinear(grid, p):
    """Independent 8-corner weighted sum used as the sampling oracle."""
    g = (np.asarray(p) - grid.world_min) / grid.voxel_size - 0.5
    i0 = np.floor(g).astype(int)
    w = g - i0
    sig = 0.0
    sh = np.zeros(27)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                ci = i0 + [di, dj, dk]
                if (ci < 0).any() or (ci >= np.asarray(grid.resolution)).any():
                    continue
                slot = grid.occupancy[ci[0], ci[1], ci[2]]
                if slot == EMPTY:
                    continue
                weight = ((w[0] if di else 1 - w[0])
                          * (w[1] if dj else 1 - w[1])
                          * (w[2] if dk else 1 - w[2]))
                sig += weight * grid.density[slot]
                sh += weight * grid.sh[slot]
    return sig, sh


class TestSampleTrilinear:
    def test_voxel_center_returns_stored_values(self, rng):
        g = random_grid(rng, (4, 4, 4))
        center = g.world_min + (np.array([2, 1, 3]) + 0.5) * g.voxel_size
        slot = g.occupancy[2, 1, 3]
        sig, sh = sample_trilinear(g, center)
        assert sig == pytest.approx(g.density[slot], abs=1e-12)
        np.testing.assert_allclose(sh, g.sh[slot], atol=1e-12)

    def test_axis_midpoint_blends_two_voxels(self):
        mask = np.zeros((4, 1, 1), bool)
        mask[1, 0, 0] = mask[2, 0, 0] = True
        g = grid_from_mask(mask, [0, 0, 0], [4, 1, 1])
        g.density[g.occupancy[1, 0, 0]] = 2.0
        g.density[g.occupancy[2, 0, 0]] = 4.0
        sig, _ = sample_trilinear(g, [2.0, 0.5, 0.5])
        assert sig == pytest.approx(3.0, abs=1e-12)

    def test_random_points_match_scalar_oracle(self, rng):
        g = random_grid(rng, (6, 5, 7))
        g = prune(g, 1.0)  # leave holes so empty corners are exercised
        pts = rng.uniform(g.world_min, g.world_max, (200, 3))
        sig, sh = sample_trilinear(g, pts)
        for i in range(200):
            osig, osh = _scalar_trilinear(g, pts[i])
            assert sig[i] == pytest.approx(max(osig, 0.0), abs=1e-12)
            np.testing.assert_allclose(sh[i], osh, atol=1e-12)

    def test_out_of_bounds_returns_zero(self, rng):
        g = random_grid(rng, (4, 4, 4))
        sig, sh = sample_trilinear(g, [10.0, 0.0, 0.0])
        assert sig == 0.0
        np.testing.assert_array_equal(sh, np.zeros(27))

    def test_continuity(self, rng):
        g = random_grid(rng, (6, 6, 6))
        eps = 1e-7 * g.voxel_size[0]
        pts = rng.uniform(g.world_min + 0.1, g.world_max - 0.1, (50, 3))
        s0, _ = sample_trilinear(g, pts)
        s1, _ = sample_trilinear(g, pts + eps)
        span = g.density.max() - g.density.min()
        assert np.abs(s1 - s0).max() < 1e-5 * span


class TestPrune:
    def test_neg_inf_threshold_keeps_everything(self, rng):
        g = random_grid(rng, (4, 4, 4))
        p = prune(g, -np.inf)
        np.testing.assert_array_equal(p.density, g.density)
        np.testing.assert_array_equal(p.sh, g.sh)
        np.testing.assert_array_equal(p.occupancy, g.occupancy)

    def test_threshold_128_keeps_only_denser_voxel(self):
        mask = np.zeros((2, 1, 1), bool)
        mask[:, 0, 0] = True
        g = grid_from_mask(mask, [0, 0, 0], [2, 1, 1])
        g.density[:] = [1.0, 2.0]
        p = prune(g, 1.28)
        assert p.slot_count == 1
        assert p.density[0] == 2.0
        assert p.occupancy[0, 0, 0] == EMPTY

    def test_survivors_bit_identical_and_idempotent(self, rng):
        g = random_grid(rng, (5, 5, 5), sigma_range=(-1.0, 2.0))
        p1 = prune(g, 0.7)
        p1.audit()
        kept = g.density >= 0.7
        np.testing.assert_array_equal(p1.density, g.density[kept])
        np.testing.assert_array_equal(p1.sh, g.sh[kept])
        p2 = prune(p1, 0.7)
        np.testing.assert_array_equal(p2.density, p1.density)
        np.testing.assert_array_equal(p2.occupancy, p1.occupancy)

    def test_pruning_inert_voxels_preserves_render(self, rng):
        g = random_grid(rng, (6, 6, 6))
        inert = rng.random(g.slot_count) < 0.3
        g.density[inert] = 0.0
        g.sh[inert] = 0.0
        p = prune(g, 1e-300)  # drops exactly the zero-density voxels
        assert p.slot_count == (~inert).sum()
        cfg = RenderConfig(use_background=False, background_brightness=0.3)
        origins = np.tile([3.0, 0.1, 0.2], (64, 1))
        dirs = random_dirs(rng, 64) * np.array([-1, 1, 1])
        r0, t0 = render_rays(g, None, origins, dirs, cfg)
        r1, t1 = render_rays(p, None, origins, dirs, cfg)
        assert np.abs(r1 - r0).max() < 1e-6
        assert np.abs(t1 - t0).max() < 1e-6


def _multilinear_field(rng):
    c = rng.normal(size=8)

    def f(p):
        x, y, z = np.moveaxis(np.asarray(p, dtype=float), -1, 0)
        return (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y
                + c[5] * y * z + c[6] * x * z + c[7] * x * y * z)

    return f


class TestUpsample:
    def test_constant_region_stays_constant(self):
        mask = np.zeros((4, 4, 4), bool)
        mask[1:3, 1:3, 1:3] = True
        g = grid_from_mask(mask, [0, 0, 0], [1, 1, 1], sigma0=2.5)
        g.sh[:] = 0.75
        u = upsample(g)
        u.audit()
        np.testing.assert_allclose(u.density, 2.5, atol=1e-12)
        np.testing.assert_allclose(u.sh, 0.75, atol=1e-12)

    def test_resolution_doubles_and_count_is_8x(self, rng):
        g = prune(random_grid(rng, (8, 8, 8)), 1.0)
        u = upsample(g)
        assert u.resolution == (16, 16, 16)
        assert u.slot_count == 8 * g.slot_count
        np.testing.assert_array_equal(u.world_min, g.world_min)
        np.testing.assert_array_equal(u.world_max, g.world_max)

    def test_linear_ramp_preserved_at_interior_children(self):
        g = dense_grid((8, 8, 8), [0, 0, 0], [8, 8, 8])
        centers = g.voxel_centers()
        g.density[:] = 3.0 * centers[:, 0] + 1.0
        u = upsample(g)
        uc = u.voxel_centers()
        interior = ((uc > g.world_min + g.voxel_size).all(axis=1)
                    & (uc < g.world_max - g.voxel_size).all(axis=1))
        expected = 3.0 * uc[interior, 0] + 1.0
        np.testing.assert_allclose(u.density[interior], expected, atol=1e-10)

    def test_preserves_multilinear_fields_in_interior(self, rng):
        g = dense_grid((8, 8, 8), [0, 0, 0], [1, 1, 1])
        f = _multilinear_field(rng)
        g.density[:] = f(g.voxel_centers())
        u = upsample(g)
        pts = rng.uniform(0.25, 0.75, (100, 3))
        s_old, _ = interpolate_raw(g, pts)
        s_new, _ = interpolate_raw(u, pts)
        np.testing.assert_allclose(s_new, s_old, atol=1e-6)
        np.testing.assert_allclose(s_old, f(pts), atol=1e-9)

    def test_rejects_resolution_overflow(self):
        mask = np.zeros((1024, 1, 1), bool)
        mask[0] = True
        g = grid_from_mask(mask, [0, 0, 0], [1, 1, 1])
        with pytest.raises(ValueError):
            upsample(g)

    def test_rejects_other_factors(self, rng):
        with pytest.raises(ValueError):
            upsample(random_grid(rng, (4, 4, 4)), factor=3)

    def test_bijection_after_prune_upsample_sequences(self, rng):
        g = random_grid(rng, (6, 6, 6), sigma_range=(-1.0, 3.0))
        g = prune(g, 0.5)
        g.audit()
        g = upsample(g)
        g.audit()
        g = prune(g, 1.0)
        g.audit()
        g = upsample(g)
        g.audit()


class TestBackground:
    def test_zero_texels_give_brightness(self, rng):
        g = random_grid(rng, (4, 4, 4))
        bg = make_background(g, n_layers=4, layer_resolution=8)
        out = background_radiance(bg, [5.0, 0.0, 0.0], [-1.0, 0.0, 0.0], t_in=0.8)
        np.testing.assert_allclose(out, 0.8 * 0.5 * np.ones(3), atol=1e-12)

    def test_fully_occluded_contributes_nothing(self, rng):
        g = random_grid(rng, (4, 4, 4))
        bg = make_background(g, n_layers=2, layer_resolution=8)
        bg.texels[:] = 1.0
        out = background_radiance(bg, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], t_in=0.0)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_opaque_red_layer_saturates(self, rng):
        g = random_grid(rng, (4, 4, 4))
        for brightness in (0.1, 0.9):
            bg = make_background(g, n_layers=1, layer_resolution=8,
                                 brightness=brightness)
            bg.texels[..., 0] = 20.0    # red logit ~ sigmoid -> 1
            bg.texels[..., 1] = -20.0
            bg.texels[..., 2] = -20.0
            bg.texels[..., 3] = 50.0    # opaque
            out = background_radiance(bg, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], t_in=0.7)
            np.testing.assert_allclose(out, [0.7, 0.0, 0.0], atol=1e-6)

    def test_ray_missing_all_layers(self, rng):
        g = random_grid(rng, (4, 4, 4))
        bg = make_background(g, n_layers=3, layer_resolution=8, brightness=0.4)
        bg.texels[:] = 5.0
        far = bg.radii[-1] * 2
        out = background_radiance(bg, bg.center + [far, 0, 0], [1.0, 0.0, 0.0], t_in=1.0)
        np.testing.assert_allclose(out, 0.4 * np.ones(3), atol=1e-12)

    def test_radii_increase_and_enclose(self, rng):
        g = random_grid(rng, (4, 4, 4))
        bg = make_background(g, n_layers=16, layer_resolution=8)
        assert (np.diff(bg.radii) > 0).all()
        assert bg.radii[0] > g.bounding_radius()

    def test_invariants_validated(self):
        with pytest.raises(ValueError):
            BackgroundModel(texels=np.zeros((2, 4, 8, 4)), radii=np.array([2.0, 1.0]),
                            center=np.zeros(3))
        with pytest.raises(ValueError):
            BackgroundModel(texels=np.zeros((1, 4, 9, 4)), radii=np.array([1.0]),
                            center=np.zeros(3))
