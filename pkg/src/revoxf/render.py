"""Emission-absorption volume rendering of voxel grids, forward and adjoint.

Samples sit at the midpoints of ``n`` equal intervals covering the part of the
ray inside the bbox, with ``n = ceil(length / (step_size * voxel_diag))``.
Per sample: ``sigma = density_scale * softplus(raw + shift)``,
``alpha = 1 - exp(-sigma * delta)``, ``w = T * alpha``.  Color and depth are
completed with the residual transmittance: background color and ``t_far``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .errors import DomainError, NumericError, StaleTraceError
from .geometry import Camera, Ray, RayBatch, camera_ray_batch
from .voxel import VoxelGrid

BACKGROUNDS = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}


def set_threads_from_env() -> None:
    """Honour ``REVOXF_THREADS`` as a cap on compiled-kernel workers."""
    n = os.environ.get("REVOXF_THREADS")
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass(frozen=True)
class RenderConfig:
    step_size: float = 0.5
    background: str = "white"
    density_activation_shift: float = -4.0
    sigmoid_color: bool = True
    early_stop_T: float = 1e-4
    # sigma per unit of scene length for softplus(raw + shift) == 1
    density_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.step_size <= 2.0):
            raise DomainError("step_size must lie in (0, 2]")
        if not (0.0 <= self.early_stop_T <= 1e-2):
            raise DomainError("early_stop_T must lie in [0, 1e-2]")
        if self.background not in BACKGROUNDS:
            raise DomainError(f"background must be one of {sorted(BACKGROUNDS)}")
        if not self.density_scale > 0:
            raise DomainError("density_scale must be positive")

    @property
    def bg(self) -> np.ndarray:
        return np.array(BACKGROUNDS[self.background])


@dataclass
class RaySampleTrace:
    """Everything the adjoint of one ray needs.  ``T[k]`` is the transmittance
    in front of sample ``k``; ``T_final`` what is left behind the last one."""

    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray
    T: np.ndarray
    T_final: float
    raw_density: np.ndarray = field(repr=False)
    raw_color: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    grid_version: int = -1

    def __len__(self) -> int:
        return len(self.t)


def _softplus(x):
    return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _corner_table(grid: VoxelGrid, pts: np.ndarray):
    """Corner indices ``(M, 8, 3)`` and weights ``(M, 8)`` for many points."""
    n = np.array(grid.dims)
    u = np.clip((pts - grid.bbox_min) / grid.spacing, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    f = u - i0
    offs = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    idx = i0[:, None, :] + offs[None]
    w = np.prod(np.where(offs[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=-1)
    return idx, w


def _segment(grid: VoxelGrid, ray: Ray, step: float):
    o, d = ray.origin, ray.direction
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (grid.bbox_min - o) / d
        tb = (grid.bbox_max - o) / d
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    for a in range(3):
        if d[a] == 0.0:
            inside = grid.bbox_min[a] <= o[a] <= grid.bbox_max[a]
            lo[a], hi[a] = (-np.inf, np.inf) if inside else (np.inf, -np.inf)
    t0 = max(lo.max(), ray.t_near)
    t1 = min(hi.min(), ray.t_far)
    if not t1 > t0:
        return t0, t1, 0, 0.0
    n = max(int(np.ceil((t1 - t0) / step)), 1)
    return t0, t1, n, (t1 - t0) / n


def render_ray(grid: VoxelGrid, ray: Ray, cfg: RenderConfig = RenderConfig()):
    """Render one ray; returns ``(color, depth, trace)``.

    ``depth`` is the distance along the ray.
    """
    if not np.isfinite(ray.t_far):
        raise DomainError("rendering needs a finite t_far")
    bg = cfg.bg
    t0, t1, n, dt = _segment(grid, ray, cfg.step_size * grid.voxel_diag)
    ts = t0 + (np.arange(n) + 0.5) * dt
    pts = ray.origin + ts[:, None] * ray.direction
    if n:
        idx, w = _corner_table(grid, pts)
        vals = grid.params[idx[..., 0], idx[..., 1], idx[..., 2]].astype(np.float64)
        raw = np.einsum("mk,mkc->mc", w, vals)
    else:
        raw = np.zeros((0, 4))
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite grid values along ray", term="grid")
    sigma = cfg.density_scale * _softplus(raw[:, 0] + cfg.density_activation_shift)
    tau = sigma * dt
    T = np.exp(-np.concatenate([[0.0], np.cumsum(tau)]))
    keep = int(np.sum(T[:-1] >= cfg.early_stop_T)) if cfg.early_stop_T > 0 else n
    # transmittance is non-increasing, so the kept samples form a prefix
    sl = slice(0, keep)
    alpha = -np.expm1(-tau[sl])
    weights = T[:keep] * alpha
    color = _sigmoid(raw[sl, 1:]) if cfg.sigmoid_color else raw[sl, 1:].copy()
    T_final = float(T[keep])
    rgb = weights @ color + T_final * bg
    depth = float(weights @ ts[sl] + T_final * ray.t_far)
    trace = RaySampleTrace(
        t=ts[sl],
        delta=np.full(keep, dt),
        sigma=sigma[sl],
        color=color,
        alpha=alpha,
        weights=weights,
        T=T[:keep],
        T_final=T_final,
        raw_density=raw[sl, 0],
        raw_color=raw[sl, 1:],
        points=pts[sl],
        grid_version=grid.version,
    )
    return rgb, depth, trace


def backprop_ray(grid: VoxelGrid, ray: Ray, cfg: RenderConfig, trace: RaySampleTrace,
                 d_color, d_depth: float) -> None:
    """Accumulate ``d(d_color . color + d_depth * depth) / d(raw grid)``."""
    if trace.grid_version != grid.version:
        raise StaleTraceError(
            f"trace from grid version {trace.grid_version}, grid is at {grid.version}"
        )
    g_c = np.asarray(d_color, dtype=np.float64).reshape(3)
    g_d = float(d_depth)
    if len(trace) == 0 or (not g_c.any() and g_d == 0.0):
        return
    e = trace.color @ g_c + g_d * trace.t
    e_bg = float(cfg.bg @ g_c + g_d * ray.t_far)
    we = trace.weights * e
    # sum_{j > k} w_j e_j
    after = np.concatenate([np.cumsum(we[::-1])[::-1][1:], [0.0]])
    T_next = trace.T * (1.0 - trace.alpha)
    d_sigma = trace.delta * (T_next * e - after - trace.T_final * e_bg)
    s = trace.raw_density + cfg.density_activation_shift
    d_raw_density = d_sigma * cfg.density_scale * _sigmoid(s)
    d_raw_color = trace.weights[:, None] * g_c[None, :]
    if cfg.sigmoid_color:
        d_raw_color = d_raw_color * trace.color * (1.0 - trace.color)
    up = np.concatenate([d_raw_density[:, None], d_raw_color], axis=1)
    idx, w = _corner_table(grid, trace.points)
    contrib = w[..., None] * up[:, None, :]
    np.add.at(grid.grad, (idx[..., 0], idx[..., 1], idx[..., 2]), contrib)


# ---------------------------------------------------------------------------
# batched path


@dataclass
class BatchRender:
    rgb: np.ndarray
    depth: np.ndarray
    T_final: np.ndarray
    grid_version: int


def _kernel_args(grid: VoxelGrid, batch: RayBatch, cfg: RenderConfig):
    return (
        grid.bbox_min,
        grid.bbox_max,
        grid.spacing,
        batch.origins,
        batch.dirs,
        batch.near,
        batch.far,
        cfg.step_size * grid.voxel_diag,
        float(cfg.density_activation_shift),
        float(cfg.density_scale),
        cfg.bg,
        float(cfg.early_stop_T),
        bool(cfg.sigmoid_color),
    )


def render_rays(grid: VoxelGrid, batch: RayBatch, cfg: RenderConfig = RenderConfig()) -> BatchRender:
    """Render many rays; depth is distance along each ray."""
    n = len(batch)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    T = np.empty(n)
    if n:
        if not np.all(np.isfinite(batch.far)):
            raise DomainError("rendering needs finite t_far")
        _kernels.render_forward(grid.params, *_kernel_args(grid, batch, cfg), rgb, depth, T)
        if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(depth))):
            raise NumericError("non-finite rendered values", term="grid")
    return BatchRender(rgb, depth, T, grid.version)


def backprop_rays(grid: VoxelGrid, batch: RayBatch, cfg: RenderConfig, fwd: BatchRender,
                  g_rgb: np.ndarray, g_depth: np.ndarray) -> None:
    if fwd.grid_version != grid.version:
        raise StaleTraceError(
            f"render from grid version {fwd.grid_version}, grid is at {grid.version}"
        )
    n = len(batch)
    if n == 0:
        return
    g_rgb = np.ascontiguousarray(np.broadcast_to(g_rgb, (n, 3)), dtype=np.float64)
    g_depth = np.ascontiguousarray(np.broadcast_to(g_depth, (n,)), dtype=np.float64)
    _kernels.render_backward(grid.params, grid.grad, *_kernel_args(grid, batch, cfg),
                             fwd.rgb, fwd.depth, g_rgb, g_depth)


def default_far(grid: VoxelGrid, cam: Camera) -> float:
    """Depth of the farthest bbox corner in front of ``cam``."""
    corners = np.array(
        [[x, y, z] for x in (grid.bbox_min[0], grid.bbox_max[0])
         for y in (grid.bbox_min[1], grid.bbox_max[1])
         for z in (grid.bbox_min[2], grid.bbox_max[2])]
    )
    zc = -(corners @ cam.R.T + cam.t)[:, 2]
    return float(max(zc.max(), 1e-6))


def render_image(grid: VoxelGrid, cam: Camera, cfg: RenderConfig = RenderConfig(),
                 near: float = 0.0, far: float | None = None, chunk: int = 1 << 16,
                 return_alpha: bool = False):
    """Render every pixel center; returns ``(rgb HxWx3, depth HxW)``.

    Depth is camera-frame depth, bounded by the depth planes ``near``/``far``;
    ``far`` defaults to the farthest bbox corner.
    """
    if far is None:
        far = default_far(grid, cam)
    batch = camera_ray_batch(cam, near, far)
    n = len(batch)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    acc = np.empty(n)
    for s in range(0, n, chunk):
        sub = batch[s:s + chunk]
        out = render_rays(grid, sub, cfg)
        rgb[s:s + chunk] = out.rgb
        depth[s:s + chunk] = out.depth * sub.zscale
        acc[s:s + chunk] = 1.0 - out.T_final
    shape = (cam.height, cam.width)
    if return_alpha:
        return rgb.reshape(shape + (3,)), depth.reshape(shape), acc.reshape(shape)
    return rgb.reshape(shape + (3,)), depth.reshape(shape)
