"""Hot numeric kernels, compiled with numba when available.

Set ``SPIDP_DISABLE_NUMBA=1`` to force the pure-numpy implementations.  Both
paths compute the same quantities and are cross-checked in the test suite;
``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("SPIDP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

# 26-neighbourhood offsets, ordered lexicographically
NEIGHBOR_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)],
    dtype=np.int64,
)


# ---------------------------------------------------------------------------
# numpy reference implementations


def trilinear_numpy(data, origin, res, points, order):
    """Trilinear value (and optionally gradient/Hessian) of a voxel grid.

    Voxel ``(i, j, k)`` is centred at ``origin + res * (i, j, k)``.  Points
    outside the box spanned by the voxel centres are clamped onto it and the
    Euclidean distance to the box is added to the value.
    """
    dims = np.array(data.shape)
    lo = origin
    hi = origin + res * (dims - 1)
    pc = np.clip(points, lo, hi)
    outside = (points < lo) | (points > hi)
    diff = points - pc
    dist = np.sqrt(np.sum(diff * diff, axis=1))

    f = (pc - origin) / res
    i0 = np.clip(np.floor(f).astype(np.int64), 0, dims - 2)
    u = f - i0
    m = points.shape[0]
    val = np.zeros(m)
    grad = np.zeros((m, 3))
    hess = np.zeros((m, 3, 3))
    for a in (0, 1):
        wa = u[:, 0] if a else 1.0 - u[:, 0]
        da = 1.0 if a else -1.0
        for b in (0, 1):
            wb = u[:, 1] if b else 1.0 - u[:, 1]
            db = 1.0 if b else -1.0
            for c in (0, 1):
                wc = u[:, 2] if c else 1.0 - u[:, 2]
                dc = 1.0 if c else -1.0
                v = data[i0[:, 0] + a, i0[:, 1] + b, i0[:, 2] + c]
                val += v * wa * wb * wc
                if order >= 1:
                    grad[:, 0] += v * da * wb * wc
                    grad[:, 1] += v * wa * db * wc
                    grad[:, 2] += v * wa * wb * dc
                if order >= 2:
                    hess[:, 0, 1] += v * da * db * wc
                    hess[:, 0, 2] += v * da * wb * dc
                    hess[:, 1, 2] += v * wa * db * dc
    val += dist
    if order >= 1:
        inside = ~outside
        grad = grad / res * inside
        far = dist > 0.0
        n = np.where(far[:, None], diff / np.where(far, dist, 1.0)[:, None], 0.0)
        grad += n
    if order >= 2:
        hess[:, 1, 0] = hess[:, 0, 1]
        hess[:, 2, 0] = hess[:, 0, 2]
        hess[:, 2, 1] = hess[:, 1, 2]
        inside = (~outside).astype(float)
        hess = hess / (res * res) * inside[:, :, None] * inside[:, None, :]
        o = outside.astype(float)
        proj = o[:, :, None] * np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        hess += np.where(far[:, None, None], proj / np.where(far, dist, 1.0)[:, None, None], 0.0)
    return val, grad, hess


def neighbor_gradient_numpy(data, origin, res, points):
    """Weighted 26-neighbour difference at the voxel containing each point."""
    dims = np.array(data.shape)
    idx = np.clip(np.rint((points - origin) / res).astype(np.int64), 0, dims - 1)
    centre = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    out = np.zeros((points.shape[0], 3))
    for off in NEIGHBOR_OFFSETS:
        nb = idx + off
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        nbc = np.clip(nb, 0, dims - 1)
        dv = data[nbc[:, 0], nbc[:, 1], nbc[:, 2]] - centre
        length = res * np.sqrt(float(off @ off))
        unit = off / np.sqrt(float(off @ off))
        out += np.where(ok, dv / length, 0.0)[:, None] * unit[None, :]
    return out


def primitive_sdf_numpy(points, spheres, boxes):
    """Union signed distance of spheres ``(c, r)`` and boxes ``(c, half)``.

    ``spheres`` is ``(S, 4)`` and ``boxes`` is ``(B, 6)``.  Empty worlds
    return ``1e3`` everywhere.
    """
    out = np.full(points.shape[0], 1e3)
    for s in spheres:
        d = np.sqrt(np.sum((points - s[:3]) ** 2, axis=1)) - s[3]
        out = np.minimum(out, d)
    for b in boxes:
        q = np.abs(points - b[:3]) - b[3:]
        outer = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1))
        inner = np.minimum(q.max(axis=1), 0.0)
        out = np.minimum(out, outer + inner)
    return out


def annulus_hits_numpy(offsets, r_in, r_out):
    r = np.sqrt(np.sum(offsets * offsets, axis=1))
    return int(np.count_nonzero((r >= r_in) & (r <= r_out)))


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _trilinear_nb(data, origin, res, points, order):
        m = points.shape[0]
        nx, ny, nz = data.shape
        dims = (nx, ny, nz)
        val = np.zeros(m)
        grad = np.zeros((m, 3))
        hess = np.zeros((m, 3, 3))
        pc = np.empty(3)
        u = np.empty(3)
        i0 = np.empty(3, dtype=np.int64)
        diff = np.empty(3)
        out = np.empty(3, dtype=np.bool_)
        for p in range(m):
            dist2 = 0.0
            for d in range(3):
                lo = origin[d]
                hi = origin[d] + res * (dims[d] - 1)
                x = points[p, d]
                if x < lo:
                    pc[d] = lo
                    out[d] = True
                elif x > hi:
                    pc[d] = hi
                    out[d] = True
                else:
                    pc[d] = x
                    out[d] = False
                diff[d] = x - pc[d]
                dist2 += diff[d] * diff[d]
                f = (pc[d] - origin[d]) / res
                k = int(np.floor(f))
                if k < 0:
                    k = 0
                if k > dims[d] - 2:
                    k = dims[d] - 2
                i0[d] = k
                u[d] = f - k
            dist = np.sqrt(dist2)
            v0 = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            h01 = 0.0
            h02 = 0.0
            h12 = 0.0
            for a in range(2):
                wa = u[0] if a else 1.0 - u[0]
                da = 1.0 if a else -1.0
                for b in range(2):
                    wb = u[1] if b else 1.0 - u[1]
                    db = 1.0 if b else -1.0
                    for c in range(2):
                        wc = u[2] if c else 1.0 - u[2]
                        dc = 1.0 if c else -1.0
                        v = data[i0[0] + a, i0[1] + b, i0[2] + c]
                        v0 += v * wa * wb * wc
                        g0 += v * da * wb * wc
                        g1 += v * wa * db * wc
                        g2 += v * wa * wb * dc
                        h01 += v * da * db * wc
                        h02 += v * da * wb * dc
                        h12 += v * wa * db * dc
            val[p] = v0 + dist
            if order >= 1:
                gg = (g0, g1, g2)
                for d in range(3):
                    gd = 0.0 if out[d] else gg[d] / res
                    if dist > 0.0:
                        gd += diff[d] / dist
                    grad[p, d] = gd
            if order >= 2:
                r2 = res * res
                hh = np.zeros((3, 3))
                hh[0, 1] = h01 / r2
                hh[1, 0] = h01 / r2
                hh[0, 2] = h02 / r2
                hh[2, 0] = h02 / r2
                hh[1, 2] = h12 / r2
                hh[2, 1] = h12 / r2
                for i in range(3):
                    for j in range(3):
                        h = 0.0 if (out[i] or out[j]) else hh[i, j]
                        if dist > 0.0:
                            e = 1.0 if (i == j and out[i]) else 0.0
                            h += (e - diff[i] * diff[j] / dist2) / dist
                        hess[p, i, j] = h
        return val, grad, hess

    @njit(cache=True)
    def _neighbor_gradient_nb(data, origin, res, points, offsets):
        m = points.shape[0]
        nx, ny, nz = data.shape
        dims = (nx, ny, nz)
        out = np.zeros((m, 3))
        idx = np.empty(3, dtype=np.int64)
        for p in range(m):
            for d in range(3):
                k = int(np.rint((points[p, d] - origin[d]) / res))
                if k < 0:
                    k = 0
                if k > dims[d] - 1:
                    k = dims[d] - 1
                idx[d] = k
            centre = data[idx[0], idx[1], idx[2]]
            for n in range(offsets.shape[0]):
                a = idx[0] + offsets[n, 0]
                b = idx[1] + offsets[n, 1]
                c = idx[2] + offsets[n, 2]
                if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz:
                    continue
                l2 = float(offsets[n, 0] ** 2 + offsets[n, 1] ** 2 + offsets[n, 2] ** 2)
                ln = np.sqrt(l2)
                w = (data[a, b, c] - centre) / (res * ln)
                for d in range(3):
                    out[p, d] += w * offsets[n, d] / ln
        return out

    @njit(cache=True)
    def _primitive_sdf_nb(points, spheres, boxes):
        m = points.shape[0]
        out = np.full(m, 1e3)
        for p in range(m):
            best = 1e3
            for s in range(spheres.shape[0]):
                d2 = 0.0
                for d in range(3):
                    t = points[p, d] - spheres[s, d]
                    d2 += t * t
                v = np.sqrt(d2) - spheres[s, 3]
                if v < best:
                    best = v
            for b in range(boxes.shape[0]):
                o2 = 0.0
                qmax = -np.inf
                for d in range(3):
                    q = abs(points[p, d] - boxes[b, d]) - boxes[b, 3 + d]
                    if q > 0.0:
                        o2 += q * q
                    if q > qmax:
                        qmax = q
                v = np.sqrt(o2) + min(qmax, 0.0)
                if v < best:
                    best = v
            out[p] = best
        return out

    @njit(cache=True)
    def _annulus_hits_nb(offsets, r_in, r_out):
        n = 0
        for i in range(offsets.shape[0]):
            r = np.sqrt(offsets[i, 0] ** 2 + offsets[i, 1] ** 2)
            if r >= r_in and r <= r_out:
                n += 1
        return n


# ---------------------------------------------------------------------------
# dispatch


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def trilinear(data, origin, res, points, order=0, backend=None):
    use_nb = HAVE_NUMBA if backend is None else backend == "numba"
    if use_nb:
        return _trilinear_nb(_f64(data), _f64(origin), float(res), _f64(points), int(order))
    return trilinear_numpy(data, np.asarray(origin, float), float(res), np.asarray(points, float), order)


def neighbor_gradient(data, origin, res, points, backend=None):
    use_nb = HAVE_NUMBA if backend is None else backend == "numba"
    if use_nb:
        return _neighbor_gradient_nb(_f64(data), _f64(origin), float(res), _f64(points), NEIGHBOR_OFFSETS)
    return neighbor_gradient_numpy(data, np.asarray(origin, float), float(res), np.asarray(points, float))


def primitive_sdf(points, spheres, boxes, backend=None):
    spheres = np.asarray(spheres, float).reshape(-1, 4)
    boxes = np.asarray(boxes, float).reshape(-1, 6)
    use_nb = HAVE_NUMBA if backend is None else backend == "numba"
    if use_nb:
        return _primitive_sdf_nb(_f64(points), _f64(spheres), _f64(boxes))
    return primitive_sdf_numpy(np.asarray(points, float), spheres, boxes)


def annulus_hits(offsets, r_in, r_out, backend=None):
    use_nb = HAVE_NUMBA if backend is None else backend == "numba"
    if use_nb:
        return int(_annulus_hits_nb(_f64(offsets), float(r_in), float(r_out)))
    return annulus_hits_numpy(np.asarray(offsets, float), r_in, r_out)
