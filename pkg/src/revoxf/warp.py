"""Depth-guided forward warping of input views and the masks built on it."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data.io import read_pfm
from .errors import DepthFileError, DomainError
from .geometry import Camera, pixel_centers, pixels_to_world, world_to_pixels

DEPTH_MODES = ("external-file", "geometric-fallback")


@dataclass
class WarpCoords:
    """Provenance of every landed target pixel (NaN where void).

    ``src_uv`` is the continuous source pixel center that won the z-buffer and
    ``dst_uv`` the continuous position it projected to.
    """

    src_uv: np.ndarray
    dst_uv: np.ndarray


@dataclass
class WarpProduct:
    target: Camera
    warped_rgb: np.ndarray
    warped_depth: np.ndarray
    m_warp: np.ndarray
    m_cor: np.ndarray
    m_unreliable: np.ndarray
    source_id: int
    ref_depth: np.ndarray | None = None
    filled: bool = False

    @property
    def reliable(self) -> np.ndarray:
        return ~self.m_unreliable

    def check(self) -> None:
        if not np.array_equal(self.m_unreliable, self.m_warp | self.m_cor):
            raise AssertionError("unreliability mask is not m_warp | m_cor")
        landed = ~self.m_warp
        if not (np.isfinite(self.warped_rgb[landed]).all() and np.isfinite(self.warped_depth[landed]).all()):
            raise AssertionError("non-finite warped values on landed pixels")


def forward_warp(src_rgb, src_depth, src_cam: Camera, dst_cam: Camera, return_coords: bool = False):
    """Splat every source pixel with valid depth into ``dst_cam``.

    Each source pixel lands on the target pixel containing its projection; on
    collisions the smallest target depth wins (ties go to the lower source
    index).  Returns ``(warped_rgb, warped_depth, m_warp)`` with NaN in voids,
    plus :class:`WarpCoords` when ``return_coords`` is set.
    """
    src_rgb = np.asarray(src_rgb, dtype=np.float64)
    src_depth = np.asarray(src_depth, dtype=np.float64)
    H, W = src_cam.height, src_cam.width
    if src_depth.shape != (H, W) or src_rgb.shape[:2] != (H, W):
        raise DomainError("source image/depth do not match the source camera")
    Hd, Wd = dst_cam.height, dst_cam.width
    valid = np.isfinite(src_depth) & (src_depth > 0)
    uv = pixel_centers(W, H)

    if src_cam.same_pose(dst_cam):
        # exact fixpoint: no arithmetic round trip
        rgb = np.where(valid[..., None], src_rgb, np.nan)
        depth = np.where(valid, src_depth, np.nan)
        m_warp = ~valid
        if not return_coords:
            return rgb, depth, m_warp
        suv = np.where(valid[..., None], uv, np.nan)
        return rgb, depth, m_warp, WarpCoords(suv, suv.copy())

    flat = np.flatnonzero(valid)
    uv_f = uv.reshape(-1, 2)[flat]
    world = pixels_to_world(src_cam, uv_f, src_depth.reshape(-1)[flat])
    duv, z = world_to_pixels(dst_cam, world)
    front = z > 0
    duv = duv[front]
    zf = z[front]
    src_idx = flat[front]
    ij = np.floor(duv).astype(np.int64)
    inb = (ij[:, 0] >= 0) & (ij[:, 0] < Wd) & (ij[:, 1] >= 0) & (ij[:, 1] < Hd)
    ij, zf, src_idx, duv = ij[inb], zf[inb], src_idx[inb], duv[inb]
    tgt = ij[:, 1] * Wd + ij[:, 0]
    order = np.lexsort((src_idx, zf, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    win = order[first]

    rgb = np.full((Hd * Wd, src_rgb.shape[2]), np.nan)
    depth = np.full(Hd * Wd, np.nan)
    rgb[tgt[win]] = src_rgb.reshape(-1, src_rgb.shape[2])[src_idx[win]]
    depth[tgt[win]] = zf[win]
    m_warp = np.ones(Hd * Wd, dtype=bool)
    m_warp[tgt[win]] = False
    rgb = rgb.reshape(Hd, Wd, -1)
    depth = depth.reshape(Hd, Wd)
    m_warp = m_warp.reshape(Hd, Wd)
    if not return_coords:
        return rgb, depth, m_warp
    suv = np.full((Hd * Wd, 2), np.nan)
    dst = np.full((Hd * Wd, 2), np.nan)
    suv[tgt[win]] = uv.reshape(-1, 2)[src_idx[win]]
    dst[tgt[win]] = duv[win]
    return rgb, depth, m_warp, WarpCoords(suv.reshape(Hd, Wd, 2), dst.reshape(Hd, Wd, 2))


def correlation_mask(src_cam: Camera, dst_cam: Camera, src_depth, rendered_dst_depth,
                     coords: WarpCoords, eps: float) -> np.ndarray:
    """Flag landed target pixels whose two world lifts are more than ``eps`` apart.

    The source pixel is lifted with its own depth; the target side uses the
    warped (continuous) position and the depth rendered at that target pixel.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    src_depth = np.asarray(src_depth, dtype=np.float64)
    rendered = np.asarray(rendered_dst_depth, dtype=np.float64)
    if rendered.shape != (dst_cam.height, dst_cam.width):
        raise DomainError("rendered depth does not match the target camera")
    landed = np.isfinite(coords.dst_uv[..., 0])
    m_cor = np.zeros(rendered.shape, dtype=bool)
    if not landed.any():
        return m_cor
    suv = coords.src_uv[landed]
    si = np.floor(suv).astype(np.int64)
    a = pixels_to_world(src_cam, suv, src_depth[si[:, 1], si[:, 0]])
    d = rendered[landed]
    ok = np.isfinite(d) & (d > 0)
    b = np.full_like(a, np.nan)
    b[ok] = pixels_to_world(dst_cam, coords.dst_uv[landed][ok], d[ok])
    gap = np.linalg.norm(a - b, axis=1)
    # a target pixel without a usable rendered depth cannot be confirmed
    m_cor[landed] = ~(gap <= eps)
    return m_cor


def unreliability_mask(m_warp, m_cor) -> np.ndarray:
    m_warp = np.asarray(m_warp, dtype=bool)
    m_cor = np.asarray(m_cor, dtype=bool)
    if m_warp.shape != m_cor.shape:
        raise DomainError(f"mask shapes differ: {m_warp.shape} vs {m_cor.shape}")
    return m_warp | m_cor


def inpaint_depth(warped_depth, m_warp) -> np.ndarray:
    """Fill voids ring by ring with the mean of already-known 4-neighbours."""
    d = np.array(warped_depth, dtype=np.float64)
    known = ~np.asarray(m_warp, dtype=bool)
    if d.shape != known.shape:
        raise DomainError("depth and mask shapes differ")
    if not known.any():
        raise DomainError("cannot inpaint a map without valid pixels")
    if not np.isfinite(d[known]).all():
        raise DomainError("valid pixels must carry finite depth")
    d[~known] = 0.0
    while not known.all():
        vals = np.zeros_like(d)
        cnt = np.zeros(d.shape)
        kv = np.where(known, d, 0.0)
        kf = known.astype(np.float64)
        vals[1:] += kv[:-1]
        cnt[1:] += kf[:-1]
        vals[:-1] += kv[1:]
        cnt[:-1] += kf[1:]
        vals[:, 1:] += kv[:, :-1]
        cnt[:, 1:] += kf[:, :-1]
        vals[:, :-1] += kv[:, 1:]
        cnt[:, :-1] += kf[:, 1:]
        ring = ~known & (cnt > 0)
        d[ring] = vals[ring] / cnt[ring]
        known = known | ring
    return d


def depth_file_name(source_id: int, target: Camera) -> str:
    return f"depth_{source_id}_{target.pose_hash()}.pfm"


def depth_provider(warped_rgb, warped_depth, m_warp, mode: str = "geometric-fallback", *,
                   depth_dir=None, source_id: int | None = None,
                   target: Camera | None = None) -> np.ndarray:
    """Reference depth for the ordering loss.

    Only relative order matters downstream, so external maps may be in any
    monotone units.  ``warped_rgb`` is accepted for providers that estimate
    depth from appearance; the built-in ones do not use it.
    """
    if mode == "geometric-fallback":
        return inpaint_depth(warped_depth, m_warp)
    if mode != "external-file":
        raise DomainError(f"unknown depth mode {mode!r}; expected one of {DEPTH_MODES}")
    if depth_dir is None or source_id is None or target is None:
        raise DomainError("external depth needs depth_dir, source_id and target")
    name = depth_file_name(source_id, target)
    path = os.path.join(os.fspath(depth_dir), name)
    if not os.path.isfile(path):
        raise DepthFileError(f"missing external depth {name} (source {source_id}) in {depth_dir}")
    d = read_pfm(path).astype(np.float64)
    shape = np.shape(m_warp)
    if d.shape != shape:
        raise DepthFileError(f"{path}: depth has shape {d.shape}, expected {shape}")
    return d


def build_warp_product(source_id: int, src_rgb, src_depth, src_cam: Camera, dst_cam: Camera,
                       rendered_dst_depth, eps: float, depth_mode: str = "geometric-fallback",
                       depth_dir=None) -> WarpProduct:
    """Warp, mask and attach the reference depth for one (source, target) pair."""
    rgb, depth, m_warp, coords = forward_warp(src_rgb, src_depth, src_cam, dst_cam, return_coords=True)
    m_cor = correlation_mask(src_cam, dst_cam, src_depth, rendered_dst_depth, coords, eps)
    prod = WarpProduct(
        target=dst_cam,
        warped_rgb=rgb,
        warped_depth=depth,
        m_warp=m_warp,
        m_cor=m_cor,
        m_unreliable=unreliability_mask(m_warp, m_cor),
        source_id=source_id,
    )
    if (~m_warp).any():
        prod.ref_depth = depth_provider(rgb, depth, m_warp, depth_mode, depth_dir=depth_dir,
                                        source_id=source_id, target=dst_cam)
        prod.filled = True
    return prod
