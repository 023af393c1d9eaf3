"""Compiled inner loops.

Grids are ``(Nx, Ny, Nz, 4)`` arrays: channel 0 is raw density, 1..3 raw color.
Values live on lattice points spanning the bounding box corners, so point
``i`` along an axis sits at ``bmin + i * spacing``.  Gradient buffers are
float64 whatever the parameter dtype.
"""

import math
import os

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is often too old; pick a layer that needs no extra runtime
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

_FM = dict(cache=True, nogil=True, fastmath=False)


@njit(**_FM)
def _softplus(x):
    if x > 20.0:
        return x
    return math.log1p(math.exp(x))


@njit(**_FM)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(**_FM)
def ray_box(o0, o1, o2, d0, d1, d2, bmin, bmax):
    """Slab test; returns (t_enter, t_exit), empty when t_exit <= t_enter."""
    t_in = -np.inf
    t_out = np.inf
    for a in range(3):
        o = o0 if a == 0 else (o1 if a == 1 else o2)
        d = d0 if a == 0 else (d1 if a == 1 else d2)
        if d == 0.0:
            if o < bmin[a] or o > bmax[a]:
                return 1.0, 0.0
            continue
        ta = (bmin[a] - o) / d
        tb = (bmax[a] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_in:
            t_in = ta
        if tb < t_out:
            t_out = tb
    return t_in, t_out


@njit(**_FM)
def _corner(x, bmin, spacing, n):
    u = (x - bmin) / spacing
    if u < 0.0:
        u = 0.0
    elif u > n - 1:
        u = float(n - 1)
    i = int(u)
    if i > n - 2:
        i = n - 2
    return i, u - i


@njit(**_FM)
def gather(P, bmin, spacing, x0, x1, x2):
    """Trilinear sample of the 4 channels at a point."""
    nx, ny, nz, _ = P.shape
    i, fx = _corner(x0, bmin[0], spacing[0], nx)
    j, fy = _corner(x1, bmin[1], spacing[1], ny)
    k, fz = _corner(x2, bmin[2], spacing[2], nz)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    w = gx * gy * gz
    a0 = w * P[i, j, k, 0]
    a1 = w * P[i, j, k, 1]
    a2 = w * P[i, j, k, 2]
    a3 = w * P[i, j, k, 3]
    w = gx * gy * fz
    a0 += w * P[i, j, k + 1, 0]
    a1 += w * P[i, j, k + 1, 1]
    a2 += w * P[i, j, k + 1, 2]
    a3 += w * P[i, j, k + 1, 3]
    w = gx * fy * gz
    a0 += w * P[i, j + 1, k, 0]
    a1 += w * P[i, j + 1, k, 1]
    a2 += w * P[i, j + 1, k, 2]
    a3 += w * P[i, j + 1, k, 3]
    w = gx * fy * fz
    a0 += w * P[i, j + 1, k + 1, 0]
    a1 += w * P[i, j + 1, k + 1, 1]
    a2 += w * P[i, j + 1, k + 1, 2]
    a3 += w * P[i, j + 1, k + 1, 3]
    w = fx * gy * gz
    a0 += w * P[i + 1, j, k, 0]
    a1 += w * P[i + 1, j, k, 1]
    a2 += w * P[i + 1, j, k, 2]
    a3 += w * P[i + 1, j, k, 3]
    w = fx * gy * fz
    a0 += w * P[i + 1, j, k + 1, 0]
    a1 += w * P[i + 1, j, k + 1, 1]
    a2 += w * P[i + 1, j, k + 1, 2]
    a3 += w * P[i + 1, j, k + 1, 3]
    w = fx * fy * gz
    a0 += w * P[i + 1, j + 1, k, 0]
    a1 += w * P[i + 1, j + 1, k, 1]
    a2 += w * P[i + 1, j + 1, k, 2]
    a3 += w * P[i + 1, j + 1, k, 3]
    w = fx * fy * fz
    a0 += w * P[i + 1, j + 1, k + 1, 0]
    a1 += w * P[i + 1, j + 1, k + 1, 1]
    a2 += w * P[i + 1, j + 1, k + 1, 2]
    a3 += w * P[i + 1, j + 1, k + 1, 3]
    return a0, a1, a2, a3


@njit(**_FM)
def _deposit(G, i, j, k, w, u0, u1, u2, u3):
    G[i, j, k, 0] += w * u0
    G[i, j, k, 1] += w * u1
    G[i, j, k, 2] += w * u2
    G[i, j, k, 3] += w * u3


@njit(**_FM)
def scatter(G, bmin, spacing, x0, x1, x2, u0, u1, u2, u3):
    """Adjoint of ``gather``: add ``u * corner_weight`` into ``G``."""
    nx, ny, nz, _ = G.shape
    i, fx = _corner(x0, bmin[0], spacing[0], nx)
    j, fy = _corner(x1, bmin[1], spacing[1], ny)
    k, fz = _corner(x2, bmin[2], spacing[2], nz)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    _deposit(G, i, j, k, gx * gy * gz, u0, u1, u2, u3)
    _deposit(G, i, j, k + 1, gx * gy * fz, u0, u1, u2, u3)
    _deposit(G, i, j + 1, k, gx * fy * gz, u0, u1, u2, u3)
    _deposit(G, i, j + 1, k + 1, gx * fy * fz, u0, u1, u2, u3)
    _deposit(G, i + 1, j, k, fx * gy * gz, u0, u1, u2, u3)
    _deposit(G, i + 1, j, k + 1, fx * gy * fz, u0, u1, u2, u3)
    _deposit(G, i + 1, j + 1, k, fx * fy * gz, u0, u1, u2, u3)
    _deposit(G, i + 1, j + 1, k + 1, fx * fy * fz, u0, u1, u2, u3)


@njit(**_FM)
def _segment(o, d, near, far, bmin, bmax, step):
    t0, t1 = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], bmin, bmax)
    if near > t0:
        t0 = near
    if far < t1:
        t1 = far
    if not t1 > t0:
        return t0, t1, 0, 0.0
    n = int(math.ceil((t1 - t0) / step))
    if n < 1:
        n = 1
    return t0, t1, n, (t1 - t0) / n


@njit(cache=True, nogil=True, parallel=True)
def render_forward(P, bmin, bmax, spacing, origins, dirs, near, far, step,
                   shift, dscale, bg, early_T, sig_color,
                   out_rgb, out_depth, out_T):
    nr = origins.shape[0]
    for r in prange(nr):
        o = origins[r]
        d = dirs[r]
        t0, t1, n, dt = _segment(o, d, near[r], far[r], bmin, bmax, step)
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        dep = 0.0
        for k in range(n):
            if T < early_T:
                break
            t = t0 + (k + 0.5) * dt
            r0, r1, r2, r3 = gather(P, bmin, spacing, o[0] + t * d[0],
                                    o[1] + t * d[1], o[2] + t * d[2])
            sig = dscale * _softplus(r0 + shift)
            a = -math.expm1(-sig * dt)
            w = T * a
            if sig_color:
                c0 += w * _sigmoid(r1)
                c1 += w * _sigmoid(r2)
                c2 += w * _sigmoid(r3)
            else:
                c0 += w * r1
                c1 += w * r2
                c2 += w * r3
            dep += w * t
            T = T * (1.0 - a)
        out_rgb[r, 0] = c0 + T * bg[0]
        out_rgb[r, 1] = c1 + T * bg[1]
        out_rgb[r, 2] = c2 + T * bg[2]
        out_depth[r] = dep + T * far[r]
        out_T[r] = T


@njit(**_FM)
def render_backward(P, G, bmin, bmax, spacing, origins, dirs, near, far, step,
                    shift, dscale, bg, early_T, sig_color,
                    rgb, depth, g_rgb, g_depth):
    """Accumulate d(g_rgb . rgb + g_depth . depth)/d(raw) into ``G``.

    ``rgb``/``depth`` must be the forward outputs for the same grid state; the
    suffix sums of the compositing adjoint are recovered from them.
    """
    nr = origins.shape[0]
    for r in range(nr):
        gc0 = g_rgb[r, 0]
        gc1 = g_rgb[r, 1]
        gc2 = g_rgb[r, 2]
        gd = g_depth[r]
        if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
            continue
        o = origins[r]
        d = dirs[r]
        t0, t1, n, dt = _segment(o, d, near[r], far[r], bmin, bmax, step)
        total = gc0 * rgb[r, 0] + gc1 * rgb[r, 1] + gc2 * rgb[r, 2] + gd * depth[r]
        T = 1.0
        prefix = 0.0
        for k in range(n):
            if T < early_T:
                break
            t = t0 + (k + 0.5) * dt
            x0 = o[0] + t * d[0]
            x1 = o[1] + t * d[1]
            x2 = o[2] + t * d[2]
            r0, r1, r2, r3 = gather(P, bmin, spacing, x0, x1, x2)
            s = r0 + shift
            sig = dscale * _softplus(s)
            a = -math.expm1(-sig * dt)
            w = T * a
            T_next = T * (1.0 - a)
            if sig_color:
                c0 = _sigmoid(r1)
                c1 = _sigmoid(r2)
                c2 = _sigmoid(r3)
                u1 = w * gc0 * c0 * (1.0 - c0)
                u2 = w * gc1 * c1 * (1.0 - c1)
                u3 = w * gc2 * c2 * (1.0 - c2)
            else:
                c0 = r1
                c1 = r2
                c2 = r3
                u1 = w * gc0
                u2 = w * gc1
                u3 = w * gc2
            e = gc0 * c0 + gc1 * c1 + gc2 * c2 + gd * t
            prefix += w * e
            dsig = dt * (T_next * e - (total - prefix))
            u0 = dsig * dscale * _sigmoid(s)
            scatter(G, bmin, spacing, x0, x1, x2, u0, u1, u2, u3)
            T = T_next


@njit(**_FM)
def dda_count(counts, org, h, origins, dirs, t0s, t1s):
    """Increment every cell each segment passes through, once per segment."""
    n = counts.shape
    for r in range(origins.shape[0]):
        t0 = t0s[r]
        t1 = t1s[r]
        if not t1 > t0:
            continue
        idx = np.empty(3, np.int64)
        stp = np.empty(3, np.int64)
        tmax = np.empty(3)
        tdel = np.empty(3)
        for a in range(3):
            x = origins[r, a] + t0 * dirs[r, a]
            i = int(math.floor((x - org[a]) / h[a]))
            if i < 0:
                i = 0
            if i > n[a] - 1:
                i = n[a] - 1
            idx[a] = i
            da = dirs[r, a]
            if da > 0.0:
                stp[a] = 1
                tmax[a] = t0 + (org[a] + (i + 1) * h[a] - x) / da
                tdel[a] = h[a] / da
            elif da < 0.0:
                stp[a] = -1
                tmax[a] = t0 + (org[a] + i * h[a] - x) / da
                tdel[a] = -h[a] / da
            else:
                stp[a] = 0
                tmax[a] = np.inf
                tdel[a] = np.inf
        while True:
            counts[idx[0], idx[1], idx[2]] += 1
            m = 0
            if tmax[1] < tmax[m]:
                m = 1
            if tmax[2] < tmax[m]:
                m = 2
            if tmax[m] >= t1:
                break
            idx[m] += stp[m]
            if idx[m] < 0 or idx[m] >= n[m]:
                break
            tmax[m] += tdel[m]


@njit(**_FM)
def _delta(diff, metric, hub):
    if metric == 0:
        return abs(diff), (1.0 if diff > 0 else (-1.0 if diff < 0 else 0.0))
    if metric == 1:
        return diff * diff, 2.0 * diff
    ad = abs(diff)
    if ad <= hub:
        return 0.5 * diff * diff, diff
    return hub * (ad - 0.5 * hub), (hub if diff > 0 else -hub)


@njit(**_FM)
def _smooth_rows(Pa, Pb, Fa, Fb, Ga, Gb, n, metric, hub, scale_d, scale_c, want_grad):
    """Pairs ``(Pa[k], Pb[k])`` for ``k < n``; returns (density, color) sums."""
    sd = 0.0
    sc = 0.0
    for k in range(n):
        fw = Fa[k] + Fb[k]
        d0 = float(Pa[k, 0]) - float(Pb[k, 0])
        d1 = float(Pa[k, 1]) - float(Pb[k, 1])
        d2 = float(Pa[k, 2]) - float(Pb[k, 2])
        d3 = float(Pa[k, 3]) - float(Pb[k, 3])
        if metric == 1:
            sd += fw * (d0 * d0)
            sc += fw * (d1 * d1 + d2 * d2 + d3 * d3)
            if want_grad:
                gd = 2.0 * scale_d * fw
                gc = 2.0 * scale_c * fw
                Ga[k, 0] += gd * d0
                Gb[k, 0] -= gd * d0
                Ga[k, 1] += gc * d1
                Gb[k, 1] -= gc * d1
                Ga[k, 2] += gc * d2
                Gb[k, 2] -= gc * d2
                Ga[k, 3] += gc * d3
                Gb[k, 3] -= gc * d3
        else:
            v0, g0 = _delta(d0, metric, hub)
            v1, g1 = _delta(d1, metric, hub)
            v2, g2 = _delta(d2, metric, hub)
            v3, g3 = _delta(d3, metric, hub)
            sd += fw * v0
            sc += fw * (v1 + v2 + v3)
            if want_grad:
                gd = scale_d * fw
                gc = scale_c * fw
                Ga[k, 0] += gd * g0
                Gb[k, 0] -= gd * g0
                Ga[k, 1] += gc * g1
                Gb[k, 1] -= gc * g1
                Ga[k, 2] += gc * g2
                Gb[k, 2] -= gc * g2
                Ga[k, 3] += gc * g3
                Gb[k, 3] -= gc * g3
    return sd, sc


@njit(**_FM)
def _smooth_slab(P, factor, metric, hub, scale_d, scale_c, G, want_grad, i):
    """Pairs inside x-slab ``i`` plus the pairs between slabs ``i`` and ``i + 1``."""
    nx, ny, nz, _ = P.shape
    sd = 0.0
    sc = 0.0
    for j in range(ny):
        Gr = G[i, j] if want_grad else G[0, 0]
        if nz > 1:
            a, b = _smooth_rows(P[i, j, :-1], P[i, j, 1:], factor[i, j, :-1], factor[i, j, 1:],
                                Gr[:-1] if want_grad else Gr, Gr[1:] if want_grad else Gr,
                                nz - 1, metric, hub, scale_d, scale_c, want_grad)
            sd += a
            sc += b
        if j + 1 < ny:
            Gn = G[i, j + 1] if want_grad else G[0, 0]
            a, b = _smooth_rows(P[i, j], P[i, j + 1], factor[i, j], factor[i, j + 1], Gr, Gn,
                                nz, metric, hub, scale_d, scale_c, want_grad)
            sd += a
            sc += b
        if i + 1 < nx:
            Gn = G[i + 1, j] if want_grad else G[0, 0]
            a, b = _smooth_rows(P[i, j], P[i + 1, j], factor[i, j], factor[i + 1, j], Gr, Gn,
                                nz, metric, hub, scale_d, scale_c, want_grad)
            sd += a
            sc += b
    return sd, sc


@njit(**_FM)
def smoothness(P, factor, metric, hub, scale_d, scale_c, G, want_grad):
    """Reliability-weighted 6-neighbour smoothness.

    Returns the raw double sums (density, color) over ordered neighbour pairs
    ``sum_v sum_u factor[v] * delta(v, u)``; optionally adds their gradients,
    scaled by ``scale_d`` / ``scale_c``, into ``G``.  Each unordered pair is
    visited once and contributes ``(factor[v] + factor[u]) * delta``.  Color
    deltas are summed over the three channels.
    """
    sd = 0.0
    sc = 0.0
    for i in range(P.shape[0]):
        a, b = _smooth_slab(P, factor, metric, hub, scale_d, scale_c, G, want_grad, i)
        sd += a
        sc += b
    return sd, sc


@njit(**_FM)
def _first_bad_channel(G, i):
    ny, nz, nc = G.shape[1:]
    for j in range(ny):
        for k in range(nz):
            for c in range(nc):
                if not math.isfinite(G[i, j, k, c]):
                    return c
    return -1


@njit(**_FM)
def _adam_slab(P, G, M, V, W, use_w, i, alr, ib2, b1, b2, eps):
    ny, nz, nc = P.shape[1:]
    ob1 = 1.0 - b1
    ob2 = 1.0 - b2
    for j in range(ny):
        for k in range(nz):
            wi = W[i, j, k] if use_w else 1.0
            for c in range(nc):
                gi = G[i, j, k, c] * wi
                if gi == 0.0:
                    M[i, j, k, c] *= b1
                    V[i, j, k, c] *= b2
                    continue
                mi = b1 * M[i, j, k, c] + ob1 * gi
                vi = b2 * V[i, j, k, c] + ob2 * gi * gi
                M[i, j, k, c] = mi
                V[i, j, k, c] = vi
                P[i, j, k, c] = P[i, j, k, c] - alr[c] * mi / (math.sqrt(vi * ib2) + eps)
                G[i, j, k, c] = 0.0


@njit(**_FM)
def adam_update(P, G, M, V, W, use_w, lr, b1, b2, eps, bc1, bc2):
    """One bias-corrected Adam step with per-channel learning rates.

    When ``use_w`` is set, each voxel's gradients are first multiplied by
    ``W[voxel]``.  Entries with a zero gradient only decay their moments.
    Gradients are zeroed as they are consumed.  Non-finite gradients are
    detected before anything is modified; the return value is -1, or the
    channel of the first non-finite gradient.
    """
    for i in range(P.shape[0]):
        bad = _first_bad_channel(G, i)
        if bad >= 0:
            return bad
    alr = lr / bc1
    for i in range(P.shape[0]):
        _adam_slab(P, G, M, V, W, use_w, i, alr, 1.0 / bc2, b1, b2, eps)
    return -1


@njit(**_FM)
def smooth_adam_update(P, G, M, V, W, use_w, lr, b1, b2, eps, bc1, bc2,
                       factor, metric, hub, scale_d, scale_c):
    """``smoothness`` with gradients followed by ``adam_update``, in one sweep.

    Slab ``i`` is updated as soon as its gradient is complete, that is after
    the pairs it shares with slab ``i + 1`` are added; later slabs never read
    it again, so results equal the two separate passes bit for bit.  A
    non-finite gradient stops the sweep: earlier slabs stay updated (and
    finite) and the offending channel is returned in place of -1.
    """
    alr = lr / bc1
    ib2 = 1.0 / bc2
    sd = 0.0
    sc = 0.0
    for i in range(P.shape[0]):
        a, b = _smooth_slab(P, factor, metric, hub, scale_d, scale_c, G, True, i)
        sd += a
        sc += b
        bad = _first_bad_channel(G, i)
        if bad >= 0:
            return sd, sc, bad
        _adam_slab(P, G, M, V, W, use_w, i, alr, ib2, b1, b2, eps)
    return sd, sc, -1


@njit(**_FM)
def scale_grads(G, weight):
    nx, ny, nz, nc = G.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                w = weight[i, j, k]
                for c in range(nc):
                    G[i, j, k, c] *= w
