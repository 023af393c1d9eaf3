from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import aimed_camera, random_grid
from revoxf.data.oracle import OracleScene, Sphere, hit_mask
from revoxf.errors import DomainError, NumericError, StaleTraceError
from revoxf.geometry import Ray, RayBatch, camera_ray_batch
from revoxf.render import (
    RenderConfig,
    backprop_ray,
    backprop_rays,
    default_far,
    render_image,
    render_ray,
    render_rays,
)
from revoxf.voxel import VoxelGrid

X_RAY = Ray(np.array([-3.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 10.0)


def inv_softplus(y):
    return np.log(np.expm1(y))


def composite_oracle(sigma_delta, colors, ts, bg, t_far):
    """Front-to-back compositing, one sample at a time."""
    T = 1.0
    rgb = np.zeros(3)
    depth = 0.0
    for sd, c, t in zip(sigma_delta, colors, ts):
        a = 1.0 - np.exp(-sd)
        rgb += T * a * np.asarray(c)
        depth += T * a * t
        T *= 1.0 - a
    return rgb + T * np.asarray(bg), depth + T * t_far, T


def random_rays(rng, n, lo=-2.5, hi=2.5):
    o = rng.uniform(lo, hi, (n, 3))
    target = rng.uniform(-0.8, 0.8, (n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near = rng.uniform(0, 0.5, n)
    far = near + rng.uniform(0.5, 6, n)
    return RayBatch(o, d, near, far)


# sharp activation so the baked surface sits within a voxel of the true one
BAKED = RenderConfig(density_activation_shift=0.0, density_scale=100.0)


def baked_sphere_grid(n=48, radius=0.6):
    g = VoxelGrid((-1, -1, -1), (1, 1, 1), (n, n, n), dtype=np.float64)
    inside = np.linalg.norm(g.lattice_points(), axis=-1) < radius
    g.density[...] = np.where(inside, 5.0, -20.0)
    g.color[...] = np.where(inside[..., None], 2.0, 0.0)
    return g


class TestRenderConfig:
    @pytest.mark.parametrize("kw", [dict(step_size=0), dict(step_size=2.5), dict(early_stop_T=0.02),
                                    dict(early_stop_T=-1), dict(background="grey"), dict(density_scale=0)])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            RenderConfig(**kw)

    def test_background_colors(self):
        np.testing.assert_array_equal(RenderConfig().bg, [1, 1, 1])
        np.testing.assert_array_equal(RenderConfig(background="black").bg, [0, 0, 0])


class TestRenderRay:
    def test_empty_grid(self):
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (4, 4, 4), np.full((4, 4, 4, 4), -1e3))
        rgb, depth, tr = render_ray(g, X_RAY, RenderConfig())
        np.testing.assert_array_equal(rgb, [1, 1, 1])
        assert tr.T_final == 1.0
        assert depth == X_RAY.t_far

    def test_ray_missing_bbox(self):
        g = random_grid(np.random.default_rng(0))
        ray = Ray(np.array([-3.0, 5.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 10.0)
        rgb, depth, tr = render_ray(g, ray, RenderConfig(background="black"))
        np.testing.assert_array_equal(rgb, 0.0)
        assert depth == 10.0 and len(tr) == 0

    def test_opaque_first_sample(self):
        # three samples over x in [-1, 1] (dt = 2/3); the first sits at t = 2
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (3, 3, 3), dtype=np.float64)
        dt = 2.0 / 3.0
        g.density[...] = inv_softplus(20.0 / dt)
        g.color[...] = [1.0, 0.0, 0.0]
        cfg = RenderConfig(density_activation_shift=0.0, sigmoid_color=False, background="white")
        ray = Ray(np.array([-1.0 - 5.0 / 3.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 10.0)
        rgb, depth, tr = render_ray(g, ray, cfg)
        assert tr.t[0] == pytest.approx(2.0, abs=1e-12)
        assert tr.sigma[0] * tr.delta[0] == pytest.approx(20.0, rel=1e-12)
        np.testing.assert_allclose(rgb, [1, 0, 0], atol=1e-6)
        assert depth == pytest.approx(2.0, abs=1e-6)

    def test_three_samples_match_compositing_oracle(self):
        # lattice points coincide with the three sample positions along x
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (7, 2, 2), dtype=np.float64)
        cfg = RenderConfig(step_size=0.3, density_activation_shift=0.0, sigmoid_color=False,
                           early_stop_T=0.0, background="black")
        dt = 2.0 / 3.0
        sd = np.array([0.5, 1.0, 0.25])
        cols = np.array([[0.9, 0.1, 0.2], [0.1, 0.8, 0.3], [0.2, 0.3, 0.7]])
        for k, ix in enumerate((1, 3, 5)):
            g.density[ix] = inv_softplus(sd[k] / dt)
            g.color[ix] = cols[k]
        for ix in (0, 2, 4, 6):
            g.density[ix] = -50.0
        ray = Ray(np.array([-2.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.0, 5.0)
        rgb, depth, tr = render_ray(g, ray, cfg)
        assert len(tr) == 3
        np.testing.assert_allclose(tr.t, [1 + 1 / 3, 2, 2 + 2 / 3], atol=1e-12)
        np.testing.assert_allclose(tr.sigma * tr.delta, sd, rtol=1e-12)
        e_rgb, e_depth, e_T = composite_oracle(sd, cols, tr.t, cfg.bg, ray.t_far)
        np.testing.assert_allclose(rgb, e_rgb, atol=1e-10)
        assert depth == pytest.approx(e_depth, abs=1e-10)
        assert tr.T_final == pytest.approx(e_T, abs=1e-10)

    def test_non_finite_grid(self, rng):
        g = random_grid(rng)
        g.params[...] = np.nan
        with pytest.raises(NumericError):
            render_ray(g, X_RAY)
        with pytest.raises(NumericError):
            render_rays(g, RayBatch.from_rays([X_RAY]))

    def test_needs_finite_far(self, rng):
        with pytest.raises(DomainError):
            render_ray(random_grid(rng), Ray(np.zeros(3), np.array([1.0, 0, 0])))


class TestTraceInvariants:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), early=st.sampled_from([0.0, 1e-4]),
           step=st.sampled_from([0.25, 0.5, 1.0]))
    def test_weights_transmittance_depth(self, seed, early, step):
        rng = np.random.default_rng(seed)
        g = random_grid(rng, (5, 5, 5), scale=4.0)
        cfg = RenderConfig(step_size=step, early_stop_T=early)
        b = random_rays(rng, 1)
        rgb, depth, tr = render_ray(g, b.ray(0), cfg)
        assert np.all(tr.weights >= 0)
        assert abs(tr.weights.sum() + tr.T_final - 1.0) <= 1e-6
        assert np.all(np.diff(np.append(tr.T, tr.T_final)) <= 0)
        assert b.near[0] <= depth <= b.far[0]


class TestBatchedKernel:
    def test_forward_matches_reference(self, rng):
        g = random_grid(rng, (6, 7, 5), scale=3.0)
        b = random_rays(rng, 200)
        for cfg in (RenderConfig(), RenderConfig(background="black", sigmoid_color=False, early_stop_T=0.0)):
            out = render_rays(g, b, cfg)
            for i in range(len(b)):
                rgb, depth, tr = render_ray(g, b.ray(i), cfg)
                np.testing.assert_allclose(out.rgb[i], rgb, atol=1e-12)
                assert out.depth[i] == pytest.approx(depth, abs=1e-12)
                assert out.T_final[i] == pytest.approx(tr.T_final, abs=1e-12)

    def test_backward_matches_reference(self, rng):
        g = random_grid(rng, (5, 5, 5), scale=3.0)
        cfg = RenderConfig()
        b = random_rays(rng, 50)
        gr = rng.normal(size=(50, 3))
        gd = rng.normal(size=50)
        out = render_rays(g, b, cfg)
        backprop_rays(g, b, cfg, out, gr, gd)
        fast = g.grad.copy()
        g.zero_grad()
        for i in range(len(b)):
            _, _, tr = render_ray(g, b.ray(i), cfg)
            backprop_ray(g, b.ray(i), cfg, tr, gr[i], gd[i])
        np.testing.assert_allclose(fast, g.grad, atol=1e-12, rtol=1e-10)

    def test_float32_storage(self, rng):
        g64 = random_grid(rng, (5, 5, 5))
        g32 = VoxelGrid(g64.bbox_min, g64.bbox_max, g64.dims, g64.params.astype(np.float32))
        g64.params[...] = g32.params
        b = random_rays(rng, 30)
        np.testing.assert_allclose(render_rays(g32, b).rgb, render_rays(g64, b).rgb, atol=1e-12)


class TestBackprop:
    def test_zero_upstream_deposits_nothing(self, rng):
        g = random_grid(rng)
        _, _, tr = render_ray(g, X_RAY)
        backprop_ray(g, X_RAY, RenderConfig(), tr, np.zeros(3), 0.0)
        assert not g.grad.any()
        out = render_rays(g, RayBatch.from_rays([X_RAY]))
        backprop_rays(g, RayBatch.from_rays([X_RAY]), RenderConfig(), out, 0.0, 0.0)
        assert not g.grad.any()

    def test_single_sample_alpha_derivative(self):
        # one sample at the middle of a 3x2x2 box: step 2.1 covers the 2-unit segment
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (3, 2, 2), dtype=np.float64)
        g.density[...] = 0.3
        g.color[...] = [0.5, 0.2, 0.1]
        cfg = RenderConfig(step_size=0.7, sigmoid_color=False, background="black", density_scale=0.8)
        _, _, tr = render_ray(g, X_RAY, cfg)
        assert len(tr) == 1
        backprop_ray(g, X_RAY, cfg, tr, np.array([1.0, 0.0, 0.0]), 0.0)
        s = 0.3 + cfg.density_activation_shift
        softplus_prime = 1.0 / (1.0 + np.exp(-s))
        sigma = tr.sigma[0]
        delta = tr.delta[0]
        expected = 0.5 * delta * cfg.density_scale * softplus_prime * np.exp(-sigma * delta)
        assert g.grad[..., 0].sum() == pytest.approx(expected, rel=1e-12)

    def test_stale_trace(self, rng):
        g = random_grid(rng)
        _, _, tr = render_ray(g, X_RAY)
        b = RayBatch.from_rays([X_RAY])
        out = render_rays(g, b)
        g.touch()
        with pytest.raises(StaleTraceError):
            backprop_ray(g, X_RAY, RenderConfig(), tr, np.ones(3), 1.0)
        with pytest.raises(StaleTraceError):
            backprop_rays(g, b, RenderConfig(), out, 1.0, 1.0)

    def test_accumulative(self, rng):
        g = random_grid(rng)
        _, _, tr = render_ray(g, X_RAY)
        backprop_ray(g, X_RAY, RenderConfig(), tr, np.ones(3), 0.5)
        once = g.grad.copy()
        backprop_ray(g, X_RAY, RenderConfig(), tr, np.ones(3), 0.5)
        np.testing.assert_allclose(g.grad, 2 * once)


class TestRenderImage:
    def test_empty_grid(self):
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (4, 4, 4), np.full((4, 4, 4, 4), -1e3))
        cam = aimed_camera((3.0, 0.5, 0.5), size=16)
        rgb, depth = render_image(g, cam, RenderConfig(), near=0.5, far=4.0)
        np.testing.assert_array_equal(rgb, 1.0)
        np.testing.assert_allclose(depth, 4.0, rtol=1e-12)

    def test_default_far_covers_bbox(self):
        g = VoxelGrid((-1, -1, -1), (1, 1, 1), (3, 3, 3))
        cam = aimed_camera((3.0, 0.0, 0.0))
        assert default_far(g, cam) == pytest.approx(4.0)

    def test_sphere_silhouette(self):
        g = baked_sphere_grid()
        cam = aimed_camera((2.6, 1.2, 0.8), size=48)
        _, _, acc = render_image(g, cam, BAKED, return_alpha=True)
        pred = acc > 0.5
        truth = hit_mask(OracleScene(spheres=[Sphere((0.0, 0.0, 0.0), 0.6)]), cam)
        iou = (pred & truth).sum() / (pred | truth).sum()
        assert iou > 0.95

    def test_resolution_independence(self, rng):
        g = random_grid(rng, (6, 6, 6))
        cam = aimed_camera((2.5, 1.0, 0.7), size=15)
        rgb, _ = render_image(g, cam, RenderConfig(), far=5.0)
        # an odd factor keeps a pixel center on the original center pixel
        fine = cam.scaled(3)
        rgb3, _ = render_image(g, fine, RenderConfig(), far=5.0)
        np.testing.assert_allclose(rgb3[22, 22], rgb[7, 7], atol=1e-6)

    def test_deterministic(self, rng):
        g = random_grid(rng)
        cam = aimed_camera((2.5, 1.0, 0.7), size=20)
        a = render_image(g, cam)
        b = render_image(g, cam)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_early_stop_soundness(self):
        g = baked_sphere_grid(32)
        cam = aimed_camera((2.6, 1.2, 0.8), size=32)
        a, _ = render_image(g, cam, replace(BAKED, early_stop_T=1e-4))
        b, _ = render_image(g, cam, replace(BAKED, early_stop_T=0.0))
        assert np.abs(a - b).max() < 2e-4

    def test_depth_is_camera_depth(self):
        g = baked_sphere_grid(48)
        cam = aimed_camera((3.0, 0.0, 0.0), size=33)
        _, depth = render_image(g, cam, BAKED)
        # the center pixel looks straight at the sphere front (x = 0.6)
        assert depth[16, 16] == pytest.approx(2.4, abs=g.voxel_diag)
        b = camera_ray_batch(cam, 0.0, 4.0)
        assert np.all(b.zscale <= 1.0)
