"""Dense voxel grids, trilinear sampling and the per-voxel reliability field.

Grid values sit on lattice points that span the bounding box corners: along an
axis with ``N`` points, point ``i`` is at ``bbox_min + i * (extent / (N - 1))``.
Density and color are stored raw; activations belong to the renderer.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels
from .errors import DomainError, FormatError
from .geometry import RayBatch

CHANNELS = {"density": slice(0, 1), "color": slice(1, 4)}


class VoxelGrid:
    """Raw density (1 channel) and color (3 channels) on a dense lattice.

    Parameters are held in one ``(Nx, Ny, Nz, 4)`` array; ``density`` and
    ``color`` are views into it.  Gradients are always float64.  ``version``
    increases on every in-place mutation so stale ray traces can be detected.
    """

    def __init__(self, bbox_min, bbox_max, dims, params=None, dtype=np.float32):
        bmin = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        bmax = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        dims = tuple(int(n) for n in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise DomainError(f"grid dims must be three values >= 2, got {dims}")
        if not np.all(bmin < bmax):
            raise DomainError("bbox_min must be < bbox_max componentwise")
        if params is None:
            params = np.zeros(dims + (4,), dtype=dtype)
        else:
            params = np.ascontiguousarray(params)
            if params.shape != dims + (4,):
                raise DomainError(f"params shape {params.shape} != {dims + (4,)}")
        self.bbox_min = bmin
        self.bbox_max = bmax
        self.dims = dims
        self.params = params
        self.grad = np.zeros(dims + (4,), dtype=np.float64)
        self.version = 0

    @classmethod
    def from_arrays(cls, bbox_min, bbox_max, density, color=None, dtype=None):
        density = np.asarray(density)
        if dtype is None:
            dtype = density.dtype if density.dtype in (np.float32, np.float64) else np.float64
        params = np.zeros(density.shape + (4,), dtype=dtype)
        params[..., 0] = density
        if color is not None:
            params[..., 1:] = color
        return cls(bbox_min, bbox_max, density.shape, params)

    @property
    def density(self) -> np.ndarray:
        return self.params[..., 0]

    @property
    def color(self) -> np.ndarray:
        return self.params[..., 1:]

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.dims) - 1)

    @property
    def voxel_diag(self) -> float:
        return float(np.linalg.norm(self.spacing))

    @property
    def dtype(self):
        return self.params.dtype

    def lattice_points(self) -> np.ndarray:
        """``(Nx, Ny, Nz, 3)`` world coordinates of every lattice point."""
        axes = [
            self.bbox_min[a] + np.arange(n) * self.spacing[a] for a, n in enumerate(self.dims)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def touch(self) -> None:
        """Mark the parameters as mutated."""
        self.version += 1

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid(self.bbox_min, self.bbox_max, self.dims, self.params.copy())
        g.grad[...] = self.grad
        return g

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.params)))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.bbox_min) and np.all(x <= self.bbox_max))


def _corner_weights(grid: VoxelGrid, x) -> tuple[list[tuple[int, int, int]], np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if not grid.contains(x):
        raise DomainError(f"point {tuple(x)} outside grid bbox")
    n = np.array(grid.dims)
    u = (x - grid.bbox_min) / grid.spacing
    u = np.clip(u, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(int), n - 2)
    f = u - i0
    idx, w = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx.append((i0[0] + dx, i0[1] + dy, i0[2] + dz))
                w.append(
                    (f[0] if dx else 1 - f[0])
                    * (f[1] if dy else 1 - f[1])
                    * (f[2] if dz else 1 - f[2])
                )
    return idx, np.array(w)


def trilinear_sample(grid: VoxelGrid, x, channel: str = "density"):
    """Trilinearly interpolated raw value(s) at world point ``x``."""
    sl = CHANNELS[channel]
    idx, w = _corner_weights(grid, x)
    out = np.zeros(sl.stop - sl.start)
    for ijk, wi in zip(idx, w):
        if wi != 0.0:
            out += wi * grid.params[ijk][sl]
    return float(out[0]) if channel == "density" else out


def trilinear_backprop(grid: VoxelGrid, x, upstream, channel: str = "density") -> None:
    """Add ``upstream * corner_weight`` to the gradient of the 8 corners."""
    sl = CHANNELS[channel]
    up = np.asarray(upstream, dtype=np.float64).reshape(sl.stop - sl.start)
    idx, w = _corner_weights(grid, x)
    for ijk, wi in zip(idx, w):
        grid.grad[ijk][sl] += wi * up


def _resample_axis(a: np.ndarray, axis: int, m: int) -> np.ndarray:
    n = a.shape[axis]
    if m == n:
        return a.copy()
    u = np.arange(m) * (n - 1) / (m - 1)
    i0 = np.minimum(np.floor(u).astype(int), n - 2)
    f = u - i0
    shape = [1] * a.ndim
    shape[axis] = m
    f = f.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo * (1.0 - f) + hi * f


def upsample(grid: VoxelGrid, new_dims) -> VoxelGrid:
    """Trilinear resampling onto a finer lattice over the same bbox."""
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or any(m < n for m, n in zip(new_dims, grid.dims)):
        raise DomainError(f"cannot shrink grid {grid.dims} to {new_dims}")
    a = grid.params.astype(np.float64)
    for axis, m in enumerate(new_dims):
        a = _resample_axis(a, axis, m)
    return VoxelGrid(grid.bbox_min, grid.bbox_max, new_dims, a.astype(grid.dtype))


# ---------------------------------------------------------------------------
# reliability


@dataclass
class ReliabilityField:
    """Per-voxel counts of reliable rays and the derived factor ``rho``."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise DomainError("ray counts must be non-negative")

    @classmethod
    def zeros(cls, dims) -> "ReliabilityField":
        return cls(np.zeros(tuple(dims), dtype=np.int64))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.counts.shape

    @cached_property
    def s_max(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0

    # counts are treated as immutable once the field exists, so the derived
    # arrays are computed once
    @cached_property
    def rho(self) -> np.ndarray:
        s_max = self.s_max
        if s_max == 0:
            return np.zeros(self.counts.shape)
        return self.counts / s_max

    @cached_property
    def _factor(self) -> np.ndarray:
        return 1.0 + np.exp(-self.rho)

    @cached_property
    def _weight(self) -> np.ndarray:
        return 1.0 + self.rho

    def smoothing_factor(self) -> np.ndarray:
        """``1 + exp(-rho)`` per voxel."""
        return self._factor

    def gradient_weight(self) -> np.ndarray:
        """``1 + rho`` per voxel."""
        return self._weight


def smooth_factor(field: ReliabilityField, v) -> float:
    v = tuple(int(i) for i in v)
    if len(v) != 3 or any(not (0 <= i < n) for i, n in zip(v, field.dims)):
        raise DomainError(f"voxel index {v} outside {field.dims}")
    s_max = field.s_max
    return 0.0 if s_max == 0 else field.counts[v] / s_max


def _clip_to_box(batch: RayBatch, bmin, bmax):
    o, d = batch.origins, batch.dirs
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (bmin - o) * inv
        tb = (bmax - o) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = d == 0.0
    inside = (o >= bmin) & (o <= bmax)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t0 = np.maximum(lo.max(axis=1), batch.near)
    t1 = np.minimum(hi.min(axis=1), batch.far)
    return t0, t1


def cell_layout(bbox_min, bbox_max, dims):
    """Origin and size of the cells owned by each lattice point.

    Each lattice point owns the slab of points nearer to it than to its
    neighbours, clipped to the bbox; an axis with a single point owns the
    whole extent.
    """
    bmin = np.asarray(bbox_min, dtype=np.float64)
    bmax = np.asarray(bbox_max, dtype=np.float64)
    n = np.asarray(dims)
    h = np.where(n > 1, (bmax - bmin) / np.maximum(n - 1, 1), bmax - bmin)
    org = np.where(n > 1, bmin - 0.5 * h, bmin)
    return org, h


def accumulate_reliability(bbox_min, bbox_max, dims, rays) -> ReliabilityField:
    """Count, for every voxel, the rays whose clipped segment enters its cell."""
    dims = tuple(int(n) for n in dims)
    counts = np.zeros(dims, dtype=np.int64)
    batch = rays if isinstance(rays, RayBatch) else RayBatch.from_rays(list(rays))
    if len(batch) == 0:
        return ReliabilityField(counts)
    bmin = np.asarray(bbox_min, dtype=np.float64)
    bmax = np.asarray(bbox_max, dtype=np.float64)
    t0, t1 = _clip_to_box(batch, bmin, bmax)
    org, h = cell_layout(bmin, bmax, dims)
    _kernels.dda_count(counts, org, h, batch.origins, batch.dirs, t0, t1)
    return ReliabilityField(counts)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RVXF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI6d3I")


def save_checkpoint(grid: VoxelGrid, path) -> None:
    """Write ``grid`` in the RVXF layout (values stored as little-endian f32).

    Arrays are written x-fastest; color is RGB-interleaved per voxel.
    """
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *grid.bbox_min, *grid.bbox_max, *grid.dims)
    dens = np.asarray(grid.density, dtype="<f4").transpose(2, 1, 0)
    col = np.asarray(grid.color, dtype="<f4").transpose(2, 1, 0, 3)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(dens).tobytes())
            f.write(np.ascontiguousarray(col).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> VoxelGrid:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, *rest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    bbox = np.array(rest[:6])
    dims = tuple(rest[6:])
    n = int(np.prod(dims))
    expected = _HEADER.size + 4 * n * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    dens = np.frombuffer(data, dtype="<f4", count=n, offset=off)
    col = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off + 4 * n)
    params = np.empty(dims + (4,), dtype=np.float32)
    params[..., 0] = dens.reshape(dims[::-1]).transpose(2, 1, 0)
    params[..., 1:] = col.reshape(dims[::-1] + (3,)).transpose(2, 1, 0, 3)
    try:
        return VoxelGrid(bbox[:3], bbox[3:], dims, params)
    except DomainError as exc:
        raise FormatError(f"{path}: {exc}") from exc
