"""Training objectives and their gradients with respect to rendered quantities.

Every sum over pixels, pairs or patches is a mean, so the weights do not depend
on image resolution or batch size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError, NumericError
from .voxel import ReliabilityField, VoxelGrid

DELTA_METRICS = {"L1": 0, "L2": 1, "Huber": 2}


@dataclass(frozen=True)
class LossWeights:
    lambda_rel: float = 1e-1
    lambda_unr: float = 1e-2
    lambda_f: float = 5e-5
    lambda_d: float = 5e-4
    lambda_ds: float = 5e-5
    # None: 1e-4 of the scene bbox diagonal, resolved by the trainer
    margin: float | None = None
    k: int = 7
    tau_d: float = 0.05
    n_pairs: int = 8
    delta_metric: str = "L2"
    huber_delta: float | None = None

    def __post_init__(self):
        for name in ("lambda_rel", "lambda_unr", "lambda_f", "lambda_d", "lambda_ds"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be a finite value >= 0")
        if self.margin is not None and not self.margin >= 0:
            raise DomainError("margin must be >= 0")
        if self.k < 3 or self.k % 2 == 0:
            raise DomainError("window k must be odd and >= 3")
        if not self.tau_d > 0:
            raise DomainError("tau_d must be positive")
        if self.n_pairs < 1:
            raise DomainError("n_pairs must be >= 1")
        if self.delta_metric not in DELTA_METRICS:
            raise DomainError(f"delta_metric must be one of {sorted(DELTA_METRICS)}")
        if self.delta_metric == "Huber" and not (self.huber_delta and self.huber_delta > 0):
            raise DomainError("the Huber metric needs a positive huber_delta")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    l_rgb: float = 0.0
    l_rel: float = 0.0
    l_unr: float = 0.0
    l_bgc: float = 0.0
    l_fc: float = 0.0
    l_sigma: float = 0.0
    l_rs: float = 0.0
    l_ds: float = 0.0
    l_total: float = 0.0
    lambda_ds: float = 0.0
    counts: dict = field(default_factory=dict)

    TERMS = ("l_rgb", "l_rel", "l_unr", "l_bgc", "l_fc", "l_sigma", "l_rs", "l_ds", "l_total")

    def check(self, tol: float = 1e-9) -> None:
        for t in self.TERMS:
            if getattr(self, t) < 0:
                raise AssertionError(f"{t} is negative")
        expect = self.l_rgb + self.l_bgc + self.l_rs + self.lambda_ds * self.l_ds
        if abs(self.l_total - expect) > tol * max(1.0, abs(expect)):
            raise AssertionError(f"l_total {self.l_total} != {expect}")

    def to_dict(self) -> dict:
        d = {t: float(getattr(self, t)) for t in self.TERMS}
        d["counts"] = dict(self.counts)
        return d


# ---------------------------------------------------------------------------
# photometric terms


def loss_rgb(rendered, target):
    """Per-channel mean squared error; returns ``(loss, d loss / d rendered)``."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise DomainError(f"shape mismatch {r.shape} vs {t.shape}")
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    diff = r - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_rel(rendered, warped, reliable):
    """Color MSE over reliable pixels only; returns ``(loss, grad, n_pixels)``.

    ``rendered``/``warped`` are ``(..., 3)``; ``reliable`` matches the leading
    shape.  Unreliable pixels may hold NaN in ``warped``.
    """
    r = np.asarray(rendered, dtype=np.float64)
    w = np.asarray(warped, dtype=np.float64)
    mask = np.asarray(reliable, dtype=bool)
    if r.shape != w.shape or r.shape[:-1] != mask.shape:
        raise DomainError("rendered, warped and mask shapes disagree")
    grad = np.zeros_like(r)
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad, 0
    diff = r[mask] - w[mask]
    grad[mask] = 2.0 * diff / diff.size
    return float(np.mean(diff * diff)), grad, n


# ---------------------------------------------------------------------------
# relative depth ordering


def pair_penalty(ds_p, ds_q, dr_p, dr_q, m: float):
    """Hinge on reversed depth order; returns ``(value, d/d ds_p, d/d ds_q)``.

    Vectorized over arrays.  The penalty is ``max(|ds_p - ds_q| - m, 0)`` when
    the rendered and reference differences have opposite signs, else 0; the
    subgradient is 0 at both kinks.
    """
    dds = np.asarray(ds_p, dtype=np.float64) - np.asarray(ds_q, dtype=np.float64)
    ddr = np.asarray(dr_p, dtype=np.float64) - np.asarray(dr_q, dtype=np.float64)
    active = (ddr * dds < 0) & (np.abs(dds) > m)
    val = np.where(active, np.abs(dds) - m, 0.0)
    g = np.where(active, np.sign(dds), 0.0)
    if val.ndim == 0:
        return float(val), float(g), float(-g)
    return val, g, -g


def _window_offsets(k: int) -> np.ndarray:
    r = k // 2
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    off = np.stack([di.ravel(), dj.ravel()], axis=1)
    return off[(off != 0).any(axis=1)]


def sample_pairs(ref, anchors, k: int, tau_d: float, n_pairs: int, rng: np.random.Generator):
    """Neighbour pairs for many anchors at once.

    ``anchors`` is ``(A, 2)`` of (row, col).  Returns ``(anchor_idx, q)`` where
    ``q`` is ``(P, 2)`` (row, col) of the neighbours and ``anchor_idx`` points
    into ``anchors``; pairs are grouped by anchor in raster order of ``q``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    H, W = ref.shape
    off = _window_offsets(k)
    q = anchors[:, None, :] + off[None]
    inb = (q[..., 0] >= 0) & (q[..., 0] < H) & (q[..., 1] >= 0) & (q[..., 1] < W)
    qc = np.clip(q, 0, [H - 1, W - 1])
    dp = ref[anchors[:, 0], anchors[:, 1]][:, None]
    dq = ref[qc[..., 0], qc[..., 1]]
    ok = inb & (np.abs(dq - dp) < tau_d * dp)
    keys = rng.random(ok.shape)
    if ok.shape[1] > n_pairs:
        keys = np.where(ok, keys, np.inf)
        cut = np.partition(keys, n_pairs - 1, axis=1)[:, n_pairs - 1:n_pairs]
        ok &= keys <= cut
    a_idx, o_idx = np.nonzero(ok)
    return a_idx, q[a_idx, o_idx]


def build_neighborhood(ref, p, k: int = 7, tau_d: float = 0.05, n_pairs: int = 8,
                       rng_seed=0) -> list[tuple[int, int]]:
    """Window neighbours ``q`` of pixel ``p = (row, col)`` with
    ``|ref[q] - ref[p]| < tau_d * ref[p]``, at most ``n_pairs`` of them."""
    _, q = sample_pairs(ref, [p], k, tau_d, n_pairs, np.random.default_rng(rng_seed))
    return [tuple(int(v) for v in x) for x in q]


def loss_unr_pairs(ds_p, ds_q, dr_p, dr_q, m: float):
    """Mean pair penalty; returns ``(loss, grad_p, grad_q)``."""
    val, gp, gq = pair_penalty(ds_p, ds_q, dr_p, dr_q, m)
    n = np.size(val)
    if n == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    return float(np.sum(val) / n), gp / n, gq / n


def loss_unr(d_s, d_ref, unreliable, weights: LossWeights, margin: float | None = None,
             rng_seed=0):
    """Ordering loss over anchors in ``unreliable`` and their depth-gated
    neighbours.  Returns ``(loss, grad map, n_pairs)``."""
    d_s = np.asarray(d_s, dtype=np.float64)
    d_ref = np.asarray(d_ref, dtype=np.float64)
    mask = np.asarray(unreliable, dtype=bool)
    if not (d_s.shape == d_ref.shape == mask.shape):
        raise DomainError("depth maps and mask must share a shape")
    m = weights.margin if margin is None else margin
    m = 0.0 if m is None else m
    grad = np.zeros_like(d_s)
    anchors = np.argwhere(mask)
    if len(anchors) == 0:
        return 0.0, grad, 0
    a_idx, q = sample_pairs(d_ref, anchors, weights.k, weights.tau_d, weights.n_pairs,
                            np.random.default_rng(rng_seed))
    p = anchors[a_idx]
    if len(p) == 0:
        return 0.0, grad, 0
    val, gp, gq = loss_unr_pairs(d_s[p[:, 0], p[:, 1]], d_s[q[:, 0], q[:, 1]],
                                 d_ref[p[:, 0], p[:, 1]], d_ref[q[:, 0], q[:, 1]], m)
    np.add.at(grad, (p[:, 0], p[:, 1]), gp)
    np.add.at(grad, (q[:, 0], q[:, 1]), gq)
    return val, grad, len(p)


def loss_bgc(l_rel: float, l_unr: float, weights: LossWeights) -> float:
    return weights.lambda_rel * l_rel + weights.lambda_unr * l_unr


# ---------------------------------------------------------------------------
# voxel regularizers


def neighbour_pair_count(dims) -> int:
    """Ordered 6-neighbour pairs of a lattice with the given dims."""
    nx, ny, nz = dims
    unordered = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
    return 2 * unordered


def smoothness_terms(params: np.ndarray, rho: np.ndarray, metric: str = "L2",
                     huber_delta: float | None = None, grad: np.ndarray | None = None,
                     scale_d: float = 0.0, scale_c: float = 0.0, factor: np.ndarray | None = None):
    """Mean reliability-weighted neighbour differences ``(L_sigma, L_fc)``.

    Works on raw ``(Nx, Ny, Nz, 4)`` arrays of any size.  When ``grad`` is given,
    ``scale_d * dL_sigma + scale_c * dL_fc`` is accumulated into it.  ``factor``
    may pass a precomputed ``1 + exp(-rho)``.
    """
    if metric not in DELTA_METRICS:
        raise DomainError(f"delta_metric must be one of {sorted(DELTA_METRICS)}")
    if metric == "Huber" and not (huber_delta and huber_delta > 0):
        raise DomainError("the Huber metric needs a positive huber_delta")
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != params.shape[:3]:
        raise DomainError(f"reliability dims {rho.shape} != grid dims {params.shape[:3]}")
    npairs = neighbour_pair_count(params.shape[:3])
    if npairs == 0:
        return 0.0, 0.0
    if factor is None:
        factor = 1.0 + np.exp(-rho)
    want = grad is not None
    G = grad if want else np.zeros((1, 1, 1, params.shape[3]))
    if want and G.shape != params.shape:
        raise DomainError("gradient buffer shape mismatch")
    sd, sc = _kernels.smoothness(params, factor, DELTA_METRICS[metric], float(huber_delta or 0.0),
                                 scale_d / npairs, scale_c / npairs, G, want)
    return sd / npairs, sc / npairs


def loss_rs(grid: VoxelGrid, field: ReliabilityField, weights: LossWeights,
            delta_metric: str | None = None, accumulate: bool = True):
    """``lambda_f * L_fc + lambda_d * L_sigma``; returns ``(loss, L_fc, L_sigma)``.

    Gradients of the weighted loss go into ``grid.grad`` when ``accumulate``.
    """
    if field.dims != grid.dims:
        raise DomainError(f"reliability dims {field.dims} != grid dims {grid.dims}")
    metric = delta_metric or weights.delta_metric
    l_sigma, l_fc = smoothness_terms(
        grid.params, field.rho, metric, weights.huber_delta,
        grid.grad if accumulate else None, weights.lambda_d, weights.lambda_f,
        factor=field.smoothing_factor(),
    )
    return weights.lambda_f * l_fc + weights.lambda_d * l_sigma, l_fc, l_sigma


def loss_ds(patches):
    """Squared differences between vertical and horizontal neighbours inside
    each patch, summed per patch and averaged over patches.

    ``patches`` is ``(R, h, w)`` (or one ``(h, w)`` patch).  Returns ``(loss, grad)``.
    """
    d = np.asarray(patches, dtype=np.float64)
    single = d.ndim == 2
    if single:
        d = d[None]
    if d.ndim != 3:
        raise DomainError("patches must be (R, h, w)")
    R, h, w = d.shape
    if h * w < 2 or min(h, w) < 1:
        raise DomainError(f"patch {h}x{w} has no neighbouring pixels")
    grad = np.zeros_like(d)
    if R == 0:
        return 0.0, grad[0] if single else grad
    dv = d[:, 1:, :] - d[:, :-1, :]
    dh = d[:, :, 1:] - d[:, :, :-1]
    val = (np.sum(dv * dv) + np.sum(dh * dh)) / R
    grad[:, 1:, :] += 2.0 * dv / R
    grad[:, :-1, :] -= 2.0 * dv / R
    grad[:, :, 1:] += 2.0 * dh / R
    grad[:, :, :-1] -= 2.0 * dh / R
    return float(val), grad[0] if single else grad


def loss_total(l_rgb: float, l_bgc: float, l_rs: float, l_ds: float, lambda_ds: float,
               **parts) -> LossReport:
    """Assemble the report; ``parts`` carries ``l_rel``, ``l_unr``, ``l_fc``,
    ``l_sigma`` and ``counts``."""
    counts = parts.pop("counts", {})
    terms = dict(l_rgb=l_rgb, l_bgc=l_bgc, l_rs=l_rs, l_ds=l_ds, **parts)
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite ({v})", term=name)
    total = l_rgb + l_bgc + l_rs + lambda_ds * l_ds
    rep = LossReport(l_total=total, lambda_ds=lambda_ds, counts=counts, **terms)
    return rep
