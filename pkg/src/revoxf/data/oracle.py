"""Procedural scenes of spheres and boxes with exact color and depth.

These stand in for photographic datasets: every pixel has an analytic surface
point, so geometry, warping and training can be checked against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..geometry import Camera, camera_rays, intrinsics, look_at, world_to_pixels


@dataclass(frozen=True)
class Texture:
    """Solid color, or a 3-D checker of two colors with cell size ``scale``."""

    color_a: tuple = (0.8, 0.3, 0.2)
    color_b: tuple | None = None
    scale: float = 0.25

    def __post_init__(self):
        for c in (self.color_a, self.color_b):
            if c is not None and not all(0.0 <= v <= 1.0 for v in c):
                raise DomainError("albedo components must lie in [0, 1]")

    def albedo(self, x: np.ndarray) -> np.ndarray:
        a = np.broadcast_to(np.asarray(self.color_a, dtype=np.float64), x.shape).copy()
        if self.color_b is None:
            return a
        parity = np.floor(x / self.scale).astype(np.int64).sum(axis=-1) % 2 == 1
        a[parity] = self.color_b
        return a


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = Texture()


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    texture: Texture = Texture()


@dataclass
class OracleScene:
    spheres: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    light_dir: tuple = (0.4, -0.3, 0.85)
    ambient: float = 0.35

    def __post_init__(self):
        lo, hi = np.asarray(self.bbox_min), np.asarray(self.bbox_max)
        if not np.all(lo < hi):
            raise DomainError("degenerate scene bbox")
        for s in self.spheres:
            c = np.asarray(s.center)
            if np.any(c - s.radius < lo) or np.any(c + s.radius > hi):
                raise DomainError(f"sphere {s} leaves the scene bbox")
        for b in self.boxes:
            if np.any(np.asarray(b.lo) < lo) or np.any(np.asarray(b.hi) > hi):
                raise DomainError(f"box {b} leaves the scene bbox")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.bbox_min, float) + np.asarray(self.bbox_max, float))

    @property
    def primitives(self) -> list:
        return list(self.spheres) + list(self.boxes)


def sphere_hits(s: Sphere, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Smallest positive ray parameter of each hit (inf on a miss); ``d`` unit."""
    oc = o - np.asarray(s.center, dtype=np.float64)
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
    disc = b * b - c
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(ok & (t1 > 0), t1, np.where(ok & (t2 > 0), t2, np.inf))
    return t


def box_hits(bx: Box, o: np.ndarray, d: np.ndarray):
    """Entry parameter (inf on a miss) and the axis of the entry face."""
    lo, hi = np.asarray(bx.lo, float), np.asarray(bx.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    # a ray parallel to a slab is inside it or misses it entirely
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t0 = tmin.max(axis=1)
    t1 = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t1 >= t0) & (t1 > 0)
    t = np.where(hit, np.where(t0 > 0, t0, t1), np.inf)
    return t, axis


def intersect(scene: OracleScene, o: np.ndarray, d: np.ndarray):
    """Nearest hit per ray: ``(t, primitive index or -1, unit normal)``."""
    o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    normal = np.zeros((n, 3))
    for k, s in enumerate(scene.spheres):
        t = sphere_hits(s, o, d)
        upd = t < best
        best[upd] = t[upd]
        which[upd] = k
        p = o[upd] + t[upd, None] * d[upd]
        normal[upd] = (p - np.asarray(s.center)) / s.radius
    off = len(scene.spheres)
    for k, bx in enumerate(scene.boxes):
        t, axis = box_hits(bx, o, d)
        upd = t < best
        best[upd] = t[upd]
        which[upd] = off + k
        nrm = np.zeros((int(upd.sum()), 3))
        ax = axis[upd]
        nrm[np.arange(len(ax)), ax] = -np.sign(d[upd, ax])
        normal[upd] = nrm
    return best, which, normal


def shade(scene: OracleScene, x: np.ndarray, which: np.ndarray, normal: np.ndarray) -> np.ndarray:
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    out = np.empty((len(x), 3))
    prims = scene.primitives
    for k, prim in enumerate(prims):
        sel = which == k
        if sel.any():
            out[sel] = prim.texture.albedo(x[sel])
    # two-sided Lambert so that back-lit faces stay textured
    lam = np.abs(normal @ light)
    return out * (scene.ambient + (1.0 - scene.ambient) * lam)[:, None]


def render_oracle(scene: OracleScene, cam: Camera, far: float | None = None):
    """Exact ``(rgb HxWx3, depth HxW)``; depth is camera-frame depth and equals
    ``far`` (default: farthest bbox corner) where nothing is hit."""
    o, d, zscale = camera_rays(cam)
    t, which, normal = intersect(scene, o, d)
    if far is None:
        lo, hi = np.asarray(scene.bbox_min, float), np.asarray(scene.bbox_max, float)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        far = float(np.max(-(corners @ cam.R.T + cam.t)[:, 2]))
    hit = which >= 0
    rgb = np.broadcast_to(np.asarray(scene.background, float), (len(t), 3)).copy()
    x = o[hit] + t[hit, None] * d[hit]
    rgb[hit] = shade(scene, x, which[hit], normal[hit])
    depth = np.full(len(t), float(far))
    depth[hit] = t[hit] * zscale[hit]
    shape = (cam.height, cam.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape)


def hit_mask(scene: OracleScene, cam: Camera) -> np.ndarray:
    o, d, _ = camera_rays(cam)
    return (intersect(scene, o, d)[1] >= 0).reshape(cam.height, cam.width)


def visible_from(scene: OracleScene, cam: Camera, x: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Whether world points ``x`` are unoccluded and inside the image of ``cam``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    uv, z = world_to_pixels(cam, x)
    inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    v = x - cam.center
    dist = np.linalg.norm(v, axis=1)
    t, _, _ = intersect(scene, np.broadcast_to(cam.center, v.shape), v / dist[:, None])
    return inside & (t >= dist - tol)


# ---------------------------------------------------------------------------
# stock scenes and camera rigs


def default_scene() -> OracleScene:
    """A small still life used by the training tests and ``oracle-gen``."""
    return OracleScene(
        spheres=[
            Sphere((0.0, 0.0, 0.05), 0.45, Texture((0.85, 0.25, 0.2), (0.95, 0.8, 0.3), 0.2)),
            Sphere((0.5, -0.45, -0.2), 0.22, Texture((0.2, 0.45, 0.85))),
            Sphere((-0.45, 0.4, -0.15), 0.28, Texture((0.25, 0.7, 0.35), (0.1, 0.3, 0.15), 0.15)),
        ],
        boxes=[
            Box((-0.75, -0.75, -0.62), (0.75, 0.75, -0.42), Texture((0.7, 0.7, 0.72), (0.35, 0.35, 0.4), 0.25)),
            Box((0.2, 0.25, -0.42), (0.6, 0.65, 0.15), Texture((0.6, 0.35, 0.75))),
        ],
        bbox_min=(-1.0, -1.0, -1.0),
        bbox_max=(1.0, 1.0, 1.0),
    )


def two_plane_scene() -> OracleScene:
    """A small square in front of a wide back wall, both facing +x."""
    return OracleScene(
        boxes=[
            Box((-0.02, -0.3, -0.3), (0.02, 0.3, 0.3), Texture((0.9, 0.2, 0.2), (0.2, 0.2, 0.9), 0.15)),
            Box((-0.95, -0.95, -0.95), (-0.9, 0.95, 0.95), Texture((0.3, 0.8, 0.3), (0.9, 0.9, 0.3), 0.2)),
        ],
        bbox_min=(-1.0, -1.0, -1.0),
        bbox_max=(1.0, 1.0, 1.0),
    )


def ring_cameras(n: int, radius: float, elevation_deg: float, width: int, height: int,
                 fov_deg: float = 40.0, center=(0.0, 0.0, 0.0), phase_deg: float = 0.0) -> list[Camera]:
    """``n`` cameras evenly spaced in azimuth, all aimed at ``center``."""
    f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    K = intrinsics(f, f, 0.5 * width, 0.5 * height)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = np.radians(phase_deg) + 2.0 * np.pi * k / n
        eye = np.asarray(center, float) + radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        cams.append(Camera(K, look_at(eye, center), width, height))
    return cams
