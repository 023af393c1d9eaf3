"""Pinhole cameras, rays and cross-view pixel transforms.

Conventions
-----------
* ``T`` maps world coordinates to camera coordinates.  The camera frame is
  right-handed with the camera looking down its own ``-z`` axis and ``+y`` up
  (the NeRF / OpenGL convention).
* Pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``; its center is at
  ``(i + 0.5, j + 0.5)``.  ``u`` runs along image columns, ``v`` down rows.
* "Depth" is always the camera-frame depth along the optical axis, i.e.
  ``-z`` in camera coordinates, never the Euclidean distance to the center.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import BehindCameraError, DomainError

# camera (OpenGL) frame <-> image-aligned (OpenCV) frame
_FLIP = np.array([1.0, -1.0, -1.0])


def _frozen(a, shape):
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise DomainError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Camera:
    """A calibrated pinhole camera.

    ``K`` is the 3x3 intrinsic matrix in pixels, ``T`` the 4x4 world-to-camera
    transform, ``width``/``height`` the image size in pixels.
    """

    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.K, (3, 3))
        T = _frozen(self.T, (4, 4))
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise DomainError("K must be upper triangular with K[2,2] == 1")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise DomainError("focal lengths must be positive")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            raise DomainError("rotation block of T is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise DomainError("rotation block of T must have determinant +1")
        if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise DomainError("last row of T must be [0, 0, 0, 1]")
        if int(self.width) < 1 or int(self.height) < 1:
            raise DomainError("image size must be at least 1x1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return -self.R[2]

    @property
    def c2w(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R.T
        M[:3, 3] = self.center
        return M

    def same_pose(self, other: "Camera") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.K, other.K)
            and np.array_equal(self.T, other.T)
        )

    def scaled(self, factor: int) -> "Camera":
        """Same camera with ``factor`` times the resolution (pixel areas shrink)."""
        K = self.K.copy()
        K[:2] *= factor
        return Camera(K, self.T, self.width * factor, self.height * factor)

    def pose_hash(self) -> str:
        """Short stable identifier of the pose, used to key external depth files."""
        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.K, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.T, dtype="<f8").tobytes())
        h.update(np.array([self.width, self.height], dtype="<i8").tobytes())
        return h.hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "T": self.T.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.asarray(d["K"]), np.asarray(d["T"]), d["width"], d["height"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = _frozen(self.origin, (3,))
        d = _frozen(self.direction, (3,))
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise DomainError("ray direction must be a unit vector")
        if not (0.0 <= self.t_near < self.t_far):
            raise DomainError("need 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "t_near", float(self.t_near))
        object.__setattr__(self, "t_far", float(self.t_far))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class WarpPoseSpec:
    """How pseudo-view poses are drawn around the input views.

    ``mode`` is ``"spherical-offset"`` (polar/azimuth offsets around a scene
    center) or ``"interpolation"`` (between adjacent input views).  Angles are
    in degrees.  In spherical mode each of the ``count`` draws yields four
    poses; in interpolation mode ``count`` poses are drawn per adjacent pair.
    """

    mode: str = "spherical-offset"
    angle_lo: float = 5.0
    angle_hi: float = 10.0
    count: int = 1

    def __post_init__(self):
        if self.mode not in ("spherical-offset", "interpolation"):
            raise DomainError(f"unknown warp pose mode {self.mode!r}")
        if not (0.0 <= self.angle_lo <= self.angle_hi < 90.0):
            raise DomainError("need 0 <= angle_lo <= angle_hi < 90")
        if int(self.count) < 1:
            raise DomainError("count must be >= 1")

    @classmethod
    def from_gamma(cls, gamma: float, count: int = 1) -> "WarpPoseSpec":
        """Spherical offsets drawn from ``[gamma - 5, gamma]`` degrees."""
        return cls("spherical-offset", max(gamma - 5.0, 0.0), gamma, count)


@dataclass
class RayBatch:
    """Structure-of-arrays view of many rays.

    ``zscale`` converts distance along each ray into camera-frame depth of the
    camera that cast it (1 when that does not apply).
    """

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    zscale: np.ndarray | None = None

    def __post_init__(self):
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.dirs = np.ascontiguousarray(self.dirs, dtype=np.float64).reshape(-1, 3)
        n = len(self.origins)
        self.near = np.ascontiguousarray(np.broadcast_to(self.near, (n,)), dtype=np.float64)
        self.far = np.ascontiguousarray(np.broadcast_to(self.far, (n,)), dtype=np.float64)
        if self.zscale is None:
            self.zscale = np.ones(n)
        self.zscale = np.ascontiguousarray(np.broadcast_to(self.zscale, (n,)), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx],
                        self.far[idx], self.zscale[idx])

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBatch":
        if not rays:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return cls(
            np.stack([r.origin for r in rays]),
            np.stack([r.direction for r in rays]),
            np.array([r.t_near for r in rays]),
            np.array([r.t_far for r in rays]),
        )

    @classmethod
    def concat(cls, batches: Sequence["RayBatch"]) -> "RayBatch":
        if not batches:
            return cls.from_rays([])
        return cls(
            np.concatenate([b.origins for b in batches]),
            np.concatenate([b.dirs for b in batches]),
            np.concatenate([b.near for b in batches]),
            np.concatenate([b.far for b in batches]),
            np.concatenate([b.zscale for b in batches]),
        )

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.dirs[i], self.near[i], self.far[i])


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    R = np.stack([right, cam_up, -fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def _check_pixel(cam: Camera, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise DomainError("pixel must be a finite (u, v) pair")
    if not (0.0 <= p[0] < cam.width and 0.0 <= p[1] < cam.height):
        raise DomainError(f"pixel {tuple(p)} outside {cam.width}x{cam.height} image")
    return p


def _unproject(K: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Image-aligned (x right, y down, z forward) direction with z == 1."""
    fx, s, cx = K[0]
    fy, cy = K[1, 1], K[1, 2]
    y = (uv[..., 1] - cy) / fy
    x = (uv[..., 0] - cx - s * y) / fx
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def _project(K: np.ndarray, q: np.ndarray):
    """Project image-aligned camera points; returns (uv, depth)."""
    z = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K[0, 0] * q[..., 0] + K[0, 1] * q[..., 1]) / z + K[0, 2]
        v = K[1, 1] * q[..., 1] / z + K[1, 2]
    return np.stack([u, v], axis=-1), z


def pixels_to_world(cam: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Vectorized back-projection; no domain checks."""
    q = _unproject(cam.K, np.asarray(uv, dtype=np.float64)) * np.asarray(depth)[..., None]
    xc = q * _FLIP
    return (xc - cam.t) @ cam.R


def world_to_pixels(cam: Camera, x: np.ndarray):
    """Vectorized projection; returns ``(uv, depth)``.  Points with
    ``depth <= 0`` are behind the camera and their ``uv`` is meaningless."""
    xc = np.asarray(x, dtype=np.float64) @ cam.R.T + cam.t
    return _project(cam.K, xc * _FLIP)


def pixel_to_ray(cam: Camera, p, near: float = 0.0, far: float = np.inf) -> Ray:
    p = _check_pixel(cam, p)
    d = (_unproject(cam.K, p) * _FLIP) @ cam.R
    return Ray(cam.center, d / np.linalg.norm(d), near, far)


def pixel_to_world(cam: Camera, p, depth: float) -> np.ndarray:
    p = _check_pixel(cam, p)
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth}")
    return pixels_to_world(cam, p, np.float64(depth))


def world_to_pixel(cam: Camera, x):
    """Project a world point; returns ``(pixel, depth)``."""
    uv, z = world_to_pixels(cam, np.asarray(x, dtype=np.float64).reshape(3))
    if not z > 0:
        raise BehindCameraError(f"point has camera-frame depth {float(z)}")
    return uv, float(z)


def warp_pixel(src: Camera, dst: Camera, p, depth: float):
    """Transfer pixel ``p`` of ``src`` seen at ``depth`` into ``dst``."""
    return world_to_pixel(dst, pixel_to_world(src, p, depth))


def pixel_centers(width: int, height: int) -> np.ndarray:
    """``(H, W, 2)`` array of pixel-center coordinates."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def camera_rays(cam: Camera, uv: np.ndarray | None = None):
    """Origins, unit directions and depth-per-distance factors for pixels.

    ``zscale`` converts distance along the ray into camera-frame depth.
    Without ``uv`` every pixel center is used, flattened row-major.
    """
    if uv is None:
        uv = pixel_centers(cam.width, cam.height).reshape(-1, 2)
    q = _unproject(cam.K, np.asarray(uv, dtype=np.float64))
    n = np.linalg.norm(q, axis=-1)
    dirs = ((q * _FLIP) @ cam.R) / n[..., None]
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return origins, dirs, 1.0 / n


def camera_ray_batch(cam: Camera, near: float, far: float, uv=None) -> RayBatch:
    """Rays through pixel centers (or ``uv``) clipped to the depth planes
    ``near`` and ``far``; ray parameters are rescaled accordingly."""
    o, d, z = camera_rays(cam, uv)
    return RayBatch(o, d, near / z, far / z, z)


# ---------------------------------------------------------------------------
# pose sampling


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    Kx = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * Kx + (1.0 - np.cos(angle)) * (Kx @ Kx)


def orbit(cam: Camera, center, d_polar: float, d_azimuth: float) -> Camera:
    """Move ``cam`` rigidly around ``center`` by polar/azimuth offsets (radians).

    The camera keeps its radius and its orientation relative to the center, so a
    camera aimed at the center stays aimed at it.
    """
    center = np.asarray(center, dtype=np.float64)
    v = cam.center - center
    zhat = np.array([0.0, 0.0, 1.0])
    axis = np.cross(zhat, v)
    if np.linalg.norm(axis) < 1e-12:
        axis = np.array([1.0, 0.0, 0.0])
    Q = _axis_angle(zhat, d_azimuth) @ _axis_angle(axis, d_polar)
    T = np.eye(4)
    T[:3, :3] = cam.R @ Q.T
    T[:3, 3] = cam.t + cam.R @ (center - Q.T @ center)
    return Camera(cam.K, T, cam.width, cam.height)


def spherical_angles(point, center) -> tuple[float, float]:
    """(polar, azimuth) of ``point`` around ``center`` in radians, polar from +z."""
    v = np.asarray(point, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    r = np.linalg.norm(v)
    return float(np.arccos(np.clip(v[2] / r, -1.0, 1.0))), float(np.arctan2(v[1], v[0]))


def interpolate_pose(a: Camera, b: Camera, w: float) -> Camera:
    """Blend two poses: linear in camera center, slerp in orientation.

    Intrinsics and image size come from ``a``.
    """
    if w == 0.0:
        return a
    if w == 1.0:
        return Camera(a.K, b.T, a.width, a.height)
    rots = Rotation.from_matrix(np.stack([a.R.T, b.R.T]))
    R_c2w = Slerp([0.0, 1.0], rots)([w]).as_matrix()[0]
    c = (1.0 - w) * a.center + w * b.center
    T = np.eye(4)
    T[:3, :3] = R_c2w.T
    T[:3, 3] = -R_c2w.T @ c
    return Camera(a.K, T, a.width, a.height)


def sample_warp_poses(
    base: Camera | Sequence[Camera],
    spec: WarpPoseSpec,
    rng_seed,
    center=None,
) -> list[Camera]:
    """Draw pseudo-view poses around the input cameras.

    Spherical mode: for every base camera and each of ``spec.count`` draws,
    angles ``theta, phi ~ U[angle_lo, angle_hi]`` give the four neighbours
    ``(+-theta, +-phi)`` in that order: ``(t, p), (-t, p), (t, -p), (-t, -p)``.
    Interpolation mode: ``spec.count`` poses per adjacent pair ``(i, i+1)``,
    pair-major order.
    """
    cams = [base] if isinstance(base, Camera) else list(base)
    if not cams:
        raise DomainError("no base cameras")
    rng = np.random.default_rng(rng_seed)
    out: list[Camera] = []
    if spec.mode == "spherical-offset":
        if center is None:
            raise DomainError("spherical-offset sampling needs a scene center")
        center = np.asarray(center, dtype=np.float64)
        for cam in cams:
            to_center = center - cam.center
            cos = float(cam.forward @ to_center) / np.linalg.norm(to_center)
            if cos < np.cos(np.radians(10.0)):
                raise DomainError("base camera does not look at the scene center")
            for _ in range(spec.count):
                th, ph = np.radians(rng.uniform(spec.angle_lo, spec.angle_hi, size=2))
                for st, sp in ((1, 1), (-1, 1), (1, -1), (-1, -1)):
                    out.append(orbit(cam, center, st * th, sp * ph))
    else:
        if len(cams) < 2:
            raise DomainError("interpolation needs at least two base cameras")
        for a, b in zip(cams[:-1], cams[1:]):
            for w in rng.uniform(0.0, 1.0, size=spec.count):
                out.append(interpolate_pose(a, b, float(w)))
    return out
