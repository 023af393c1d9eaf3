import numpy as np
import pytest
from scipy import ndimage

from revoxf.data.oracle import hit_mask, render_oracle, ring_cameras, visible_from
from revoxf.geometry import Camera, intrinsics, look_at, orbit, pixel_centers, pixels_to_world
from revoxf.voxel import VoxelGrid


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_camera(rng, width=64, height=48) -> Camera:
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.normal(size=3)
    f = rng.uniform(40, 120)
    K = intrinsics(f, f * rng.uniform(0.9, 1.1), width * rng.uniform(0.4, 0.6), height * rng.uniform(0.4, 0.6))
    return Camera(K, T, width, height)


def identity_camera(width=100, height=100, f=100.0) -> Camera:
    return Camera(intrinsics(f, f, width / 2, height / 2), np.eye(4), width, height)


def aimed_camera(eye, target=(0.0, 0.0, 0.0), size=32, fov_deg=40.0) -> Camera:
    f = 0.5 * size / np.tan(0.5 * np.radians(fov_deg))
    return Camera(intrinsics(f, f, size / 2, size / 2), look_at(eye, target), size, size)


def random_grid(rng, dims=(6, 6, 6), lo=-1.0, hi=1.0, dtype=np.float64, scale=2.0) -> VoxelGrid:
    params = rng.normal(size=tuple(dims) + (4,)) * scale
    return VoxelGrid((lo,) * 3, (hi,) * 3, dims, params.astype(dtype))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_plane_views(size=96, angles=(8.0, -6.0)):
    """Source camera facing the two-plane scene and a destination orbited by ``angles`` (degrees)."""
    src = ring_cameras(1, 3.0, 0.0, size, size)[0]
    dst = orbit(src, (0.0, 0.0, 0.0), np.radians(angles[0]), np.radians(angles[1]))
    return src, dst


def disocclusion_f1(scene, src, dst, m_warp):
    """F1 of ``m_warp`` against the analytic set of target pixels whose surface
    point is not visible from ``src``, ignoring a 1-pixel band at its boundary."""
    _, ddep = render_oracle(scene, dst)
    X = pixels_to_world(dst, pixel_centers(dst.width, dst.height).reshape(-1, 2), ddep.reshape(-1))
    vis = visible_from(scene, src, X).reshape(ddep.shape)
    truth = ~(hit_mask(scene, dst) & vis)
    band = ndimage.binary_dilation(truth) & ~ndimage.binary_erosion(truth, border_value=1)
    keep = ~band
    tp = (m_warp & truth & keep).sum()
    fp = (m_warp & ~truth & keep).sum()
    fn = (~m_warp & truth & keep).sum()
    return 2 * tp / (2 * tp + fp + fn)
