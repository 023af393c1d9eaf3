import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import aimed_camera, identity_camera, random_camera, random_rotation
from revoxf.data.oracle import OracleScene, Sphere, render_oracle
from revoxf.errors import BehindCameraError, DomainError
from revoxf.geometry import (
    Camera,
    Ray,
    RayBatch,
    WarpPoseSpec,
    camera_ray_batch,
    camera_rays,
    interpolate_pose,
    intrinsics,
    pixel_to_ray,
    pixel_to_world,
    sample_warp_poses,
    spherical_angles,
    warp_pixel,
    world_to_pixel,
    world_to_pixels,
)

SEEDS = st.integers(0, 2**31 - 1)


def homogeneous_lift(cam, p, depth):
    """Independent 4x4 evaluation: K^-1 in image frame, flip to camera frame, T^-1."""
    Kh = np.eye(4)
    Kh[:3, :3] = cam.K
    flip = np.diag([1.0, -1.0, -1.0, 1.0])
    ph = np.array([p[0] * depth, p[1] * depth, depth, 1.0])
    return (np.linalg.inv(cam.T) @ flip @ np.linalg.inv(Kh) @ ph)[:3]


class TestCamera:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(DomainError):
            Camera(intrinsics(-1, 1, 0, 0), np.eye(4), 4, 4)
        K = intrinsics(1, 1, 0, 0)
        K[1, 0] = 0.5
        with pytest.raises(DomainError):
            Camera(K, np.eye(4), 4, 4)

    def test_rejects_non_rigid_extrinsics(self):
        T = np.eye(4)
        T[0, 0] = 2.0
        with pytest.raises(DomainError):
            Camera(intrinsics(1, 1, 0, 0), T, 4, 4)
        T = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(DomainError):
            Camera(intrinsics(1, 1, 0, 0), T, 4, 4)

    def test_rejects_empty_image(self):
        with pytest.raises(DomainError):
            Camera(intrinsics(1, 1, 0, 0), np.eye(4), 0, 4)

    def test_dict_round_trip(self, rng):
        cam = random_camera(rng)
        back = Camera.from_dict(cam.to_dict())
        assert back.same_pose(cam)
        assert back.pose_hash() == cam.pose_hash()

    def test_center_and_forward(self):
        cam = aimed_camera((3.0, 0.0, 0.0))
        np.testing.assert_allclose(cam.center, [3, 0, 0], atol=1e-12)
        np.testing.assert_allclose(cam.forward, [-1, 0, 0], atol=1e-12)


class TestRay:
    def test_requires_unit_direction(self):
        with pytest.raises(DomainError):
            Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))

    def test_requires_ordered_bounds(self):
        with pytest.raises(DomainError):
            Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 2.0, 1.0)
        with pytest.raises(DomainError):
            Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), -1.0, 1.0)

    def test_batch_round_trip(self):
        rays = [Ray(np.array([0.0, 0, i]), np.array([1.0, 0, 0]), 0.5, 2.0 + i) for i in range(3)]
        b = RayBatch.from_rays(rays)
        assert len(b) == 3
        r = b.ray(2)
        np.testing.assert_array_equal(r.origin, rays[2].origin)
        assert r.t_far == rays[2].t_far
        assert len(RayBatch.concat([b, b[:1]])) == 4


class TestPixelToRay:
    def test_principal_point_ray_is_forward(self):
        cam = identity_camera()
        r = pixel_to_ray(cam, (50, 50))
        np.testing.assert_allclose(r.direction, cam.forward, atol=1e-15)
        np.testing.assert_allclose(r.origin, 0.0)

    def test_offset_pixel_is_45_degrees(self):
        # the image must be wide enough to contain u = 150
        cam = identity_camera()
        wide = Camera(cam.K, cam.T, 200, 100)
        r = pixel_to_ray(wide, (150, 50))
        np.testing.assert_allclose(r.direction, [np.sqrt(0.5), 0.0, -np.sqrt(0.5)], atol=1e-15)

    @pytest.mark.parametrize("p", [(-1, 0), (0, -0.1), (100, 5), (5, 100), (np.nan, 1)])
    def test_out_of_bounds(self, p):
        with pytest.raises(DomainError):
            pixel_to_ray(identity_camera(), p)

    def test_passes_through_back_projection(self, rng):
        cam = random_camera(rng)
        p = (10.3, 20.7)
        r = pixel_to_ray(cam, p)
        x = pixel_to_world(cam, p, 2.5)
        t = (x - r.origin) @ r.direction
        np.testing.assert_allclose(r.at(t), x, atol=1e-12)
        assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)


class TestPixelToWorld:
    def test_principal_point(self):
        cam = identity_camera()
        np.testing.assert_allclose(pixel_to_world(cam, (50, 50), 2.0), [0, 0, -2], atol=1e-15)

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_non_positive_depth(self, d):
        with pytest.raises(DomainError):
            pixel_to_world(identity_camera(), (50, 50), d)

    def test_matches_homogeneous_matrix_oracle(self, rng):
        for _ in range(200):
            cam = random_camera(rng)
            p = rng.uniform([0, 0], [cam.width, cam.height])
            d = rng.uniform(0.1, 20)
            np.testing.assert_allclose(pixel_to_world(cam, p, d), homogeneous_lift(cam, p, d), atol=1e-9)


class TestWorldToPixel:
    def test_forward_axis_point(self):
        uv, z = world_to_pixel(identity_camera(), [0, 0, -3])
        np.testing.assert_allclose(uv, [50, 50])
        assert z == 3.0

    @pytest.mark.parametrize("x", [[1.0, 1.0, 0.0], [0.0, 0.0, 2.0]])
    def test_behind_camera(self, x):
        with pytest.raises(BehindCameraError):
            world_to_pixel(identity_camera(), x)

    def test_round_trip_1000(self, rng):
        for _ in range(1000):
            cam = random_camera(rng)
            p = rng.uniform([0, 0], [cam.width, cam.height])
            d = rng.uniform(0.05, 50)
            uv, z = world_to_pixel(cam, pixel_to_world(cam, p, d))
            np.testing.assert_allclose(uv, p, atol=1e-7, rtol=0)
            assert z == pytest.approx(d, abs=1e-9 * max(1.0, d))

    def test_vectorized_agrees(self, rng):
        cam = random_camera(rng)
        x = rng.normal(size=(50, 3)) + cam.center + 5 * cam.forward
        uv, z = world_to_pixels(cam, x)
        for k in range(50):
            u1, z1 = world_to_pixel(cam, x[k])
            np.testing.assert_allclose(uv[k], u1, rtol=1e-12)
            assert z[k] == pytest.approx(z1, rel=1e-12)


class TestWarpPixel:
    def test_identity(self, rng):
        cam = random_camera(rng)
        for _ in range(50):
            p = rng.uniform([0, 0], [cam.width, cam.height])
            uv, z = warp_pixel(cam, cam, p, 3.0)
            np.testing.assert_allclose(uv, p, atol=1e-7)
            assert z == pytest.approx(3.0, abs=1e-9)

    def test_behind_destination(self):
        src = identity_camera()
        T = np.eye(4)
        T[2, 3] = 20.0  # same heading, centered 20 units ahead: the point is behind it
        dst = Camera(src.K, T, 100, 100)
        with pytest.raises(BehindCameraError):
            warp_pixel(src, dst, (50, 50), 10.0)

    def test_chaining(self, rng):
        for _ in range(100):
            a, b, c = (random_camera(rng) for _ in range(3))
            x = a.center + 4 * a.forward + rng.normal(size=3) * 0.3
            try:
                pa, da = world_to_pixel(a, x)
                pb, db = warp_pixel(a, b, pa, da)
                pc1, dc1 = warp_pixel(b, c, pb, db)
                pc2, dc2 = warp_pixel(a, c, pa, da)
            except (BehindCameraError, DomainError):
                continue
            np.testing.assert_allclose(pc1, pc2, atol=1e-6)
            assert dc1 == pytest.approx(dc2, rel=1e-9)

    def test_sphere_surface_matches_analytic_projection(self):
        scene = OracleScene(spheres=[Sphere((0.0, 0.0, 0.0), 0.6)])
        src = aimed_camera((3.0, 0.0, 0.5), size=48)
        dst = aimed_camera((2.8, 1.0, 0.4), size=48)
        _, depth = render_oracle(scene, src)
        hit = depth < depth.max()
        vs, us = np.nonzero(hit)
        checked = 0
        for v, u in zip(vs[::7], us[::7]):
            p = (u + 0.5, v + 0.5)
            x = pixel_to_world(src, p, depth[v, u])
            # the lifted point lies on the sphere
            assert np.linalg.norm(x) == pytest.approx(0.6, abs=1e-9)
            uv, _ = warp_pixel(src, dst, p, depth[v, u])
            uv_true, _ = world_to_pixel(dst, x)
            assert np.linalg.norm(uv - uv_true) < 0.5
            checked += 1
        assert checked > 20


class TestCameraRays:
    def test_zscale_converts_distance_to_depth(self, rng):
        cam = random_camera(rng)
        o, d, z = camera_rays(cam)
        t = rng.uniform(1, 5, len(d))
        x = o + t[:, None] * d
        _, depth = world_to_pixels(cam, x)
        np.testing.assert_allclose(depth, t * z, rtol=1e-12)

    def test_batch_clips_at_depth_planes(self, rng):
        cam = random_camera(rng)
        b = camera_ray_batch(cam, 1.0, 4.0)
        _, dn = world_to_pixels(cam, b.origins + b.near[:, None] * b.dirs)
        _, df = world_to_pixels(cam, b.origins + b.far[:, None] * b.dirs)
        np.testing.assert_allclose(dn, 1.0, rtol=1e-12)
        np.testing.assert_allclose(df, 4.0, rtol=1e-12)


class TestWarpPoseSpec:
    @pytest.mark.parametrize("lo,hi,count", [(-1, 5, 1), (6, 5, 1), (5, 90, 1), (5, 10, 0)])
    def test_invalid(self, lo, hi, count):
        with pytest.raises(DomainError):
            WarpPoseSpec("spherical-offset", lo, hi, count)

    def test_unknown_mode(self):
        with pytest.raises(DomainError):
            WarpPoseSpec("random")

    @pytest.mark.parametrize("gamma,lo,hi", [(10, 5, 10), (20, 15, 20), (3, 0, 3)])
    def test_from_gamma(self, gamma, lo, hi):
        s = WarpPoseSpec.from_gamma(gamma)
        assert (s.angle_lo, s.angle_hi) == (lo, hi)


class TestSampleWarpPoses:
    center = np.zeros(3)

    def base(self):
        return aimed_camera((2.5, 1.0, 1.2))

    def test_zero_angles_reproduce_base(self):
        base = self.base()
        poses = sample_warp_poses(base, WarpPoseSpec("spherical-offset", 0, 0, 1), 0, center=self.center)
        assert len(poses) == 4
        for p in poses:
            np.testing.assert_allclose(p.T, base.T, atol=1e-12)

    def test_angles_within_range(self):
        base = self.base()
        spec = WarpPoseSpec("spherical-offset", 5, 10, 3)
        poses = sample_warp_poses(base, spec, 7, center=self.center)
        assert len(poses) == 12
        pol0, az0 = spherical_angles(base.center, self.center)
        r0 = np.linalg.norm(base.center)
        signs = [(1, 1), (-1, 1), (1, -1), (-1, -1)]
        for k, p in enumerate(poses):
            pol, az = spherical_angles(p.center, self.center)
            dpol, daz = np.degrees(pol - pol0), np.degrees(az - az0)
            assert 5 - 1e-9 <= abs(dpol) <= 10 + 1e-9
            assert 5 - 1e-9 <= abs(daz) <= 10 + 1e-9
            sp, sa = signs[k % 4]
            assert np.sign(dpol) == sp and np.sign(daz) == sa
            assert np.linalg.norm(p.center) == pytest.approx(r0, rel=1e-12)
            # still aimed at the center
            to_c = (self.center - p.center) / r0
            assert p.forward @ to_c == pytest.approx(1.0, abs=1e-9)
            R = p.R
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-6)

    def test_deterministic(self):
        spec = WarpPoseSpec("spherical-offset", 5, 10, 2)
        a = sample_warp_poses(self.base(), spec, 11, center=self.center)
        b = sample_warp_poses(self.base(), spec, 11, center=self.center)
        c = sample_warp_poses(self.base(), spec, 12, center=self.center)
        assert all(np.array_equal(x.T, y.T) for x, y in zip(a, b))
        assert not all(np.array_equal(x.T, y.T) for x, y in zip(a, c))

    def test_empty_base(self):
        with pytest.raises(DomainError):
            sample_warp_poses([], WarpPoseSpec(), 0, center=self.center)

    def test_spherical_needs_center_facing_camera(self):
        with pytest.raises(DomainError):
            sample_warp_poses(self.base(), WarpPoseSpec(), 0)
        away = aimed_camera((2.5, 1.0, 1.2), target=(5.0, 2.0, 2.4))
        with pytest.raises(DomainError):
            sample_warp_poses(away, WarpPoseSpec(), 0, center=self.center)

    def test_interpolation(self):
        a = aimed_camera((3, 0, 1))
        b = aimed_camera((0, 3, 1))
        c = aimed_camera((-3, 0, 1))
        poses = sample_warp_poses([a, b, c], WarpPoseSpec("interpolation", 0, 0, 3), 0)
        assert len(poses) == 6
        for p in poses:
            np.testing.assert_allclose(p.R.T @ p.R, np.eye(3), atol=1e-6)
        with pytest.raises(DomainError):
            sample_warp_poses([a], WarpPoseSpec("interpolation", 0, 0, 1), 0)

    def test_interpolation_endpoints(self):
        a = aimed_camera((3, 0, 1))
        b = aimed_camera((0, 3, 1))
        assert np.array_equal(interpolate_pose(a, b, 0.0).T, a.T)
        assert np.array_equal(interpolate_pose(a, b, 1.0).T, b.T)
        mid = interpolate_pose(a, b, 0.5)
        np.testing.assert_allclose(mid.center, 0.5 * (a.center + b.center), atol=1e-12)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(seed=SEEDS, u=st.floats(0, 0.999), v=st.floats(0, 0.999), d=st.floats(0.01, 100))
    def test_round_trip(self, seed, u, v, d):
        cam = random_camera(np.random.default_rng(seed))
        p = np.array([u * cam.width, v * cam.height])
        uv, z = world_to_pixel(cam, pixel_to_world(cam, p, d))
        np.testing.assert_allclose(uv, p, atol=1e-7, rtol=0)
        assert abs(z - d) <= 1e-9 * max(1.0, d)

    @settings(max_examples=30, deadline=None)
    @given(seed=SEEDS)
    def test_generated_rotations_orthonormal(self, seed):
        rng = np.random.default_rng(seed)
        base = aimed_camera(random_rotation(rng)[0] * 3.0)
        for p in sample_warp_poses(base, WarpPoseSpec("spherical-offset", 5, 10, 2), seed, center=np.zeros(3)):
            np.testing.assert_allclose(p.R.T @ p.R, np.eye(3), atol=1e-6)
            assert np.linalg.det(p.R) == pytest.approx(1.0, abs=1e-6)
