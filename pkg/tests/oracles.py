"""Independent reference computations used by the tests.

None of these call into the package's traversal code.
"""
import math

import numba
import numpy as np


@numba.njit(cache=True)
def _voxel_at(origin, edge, dims, o, d, t):
    idx = 0
    mul = 1
    for a in range(3):
        k = math.floor((o[a] + t * d[a] - origin[a]) / edge)
        if k < 0 or k >= dims[a]:
            return -1
        idx += int(k) * mul
        mul *= dims[a]
    return idx


@numba.njit(cache=True)
def _binned(origin, edge, dims, o, d, length, step, out_vox, out_len):
    """Fine-step binning with bisection-refined voxel changes.

    Sample the ray at step midpoints and bin by containing voxel; where the
    voxel changes between two samples, the boundary is located by bisection
    so the per-voxel sums are not limited by the step size. Voxels clipped
    thinner than a step are found by bisecting again from each boundary.
    """
    n = max(1, int(math.ceil(length / step)))
    h = length / n
    cur = _voxel_at(origin, edge, dims, o, d, 0.5 * h)
    t_start = 0.0
    m = 0
    for i in range(1, n):
        t = (i + 0.5) * h
        v = _voxel_at(origin, edge, dims, o, d, t)
        a = t - h
        guard = 0
        while v != cur and guard < 8:
            b = t
            for _ in range(60):
                mid = 0.5 * (a + b)
                if _voxel_at(origin, edge, dims, o, d, mid) == cur:
                    a = mid
                else:
                    b = mid
            out_vox[m] = cur
            out_len[m] = b - t_start
            m += 1
            t_start = b
            cur = _voxel_at(origin, edge, dims, o, d, b)
            a = b
            guard += 1
    out_vox[m] = cur
    out_len[m] = length - t_start
    return m + 1


def binned_traversal(geom, origin, direction, length, step=1e-5) -> dict:
    """{voxel index (-1 for outside): travelled distance} by fine-step binning."""
    cap = int(length / step) + 4
    vox = np.empty(cap, np.int64)
    lens = np.empty(cap)
    m = _binned(np.asarray(geom.origin, float), geom.edge_length, np.asarray(geom.dims),
                np.asarray(origin, float), np.asarray(direction, float), float(length), step,
                vox, lens)
    out = {}
    for v, L in zip(vox[:m], lens[:m]):
        out[int(v)] = out.get(int(v), 0.0) + float(L)
    return out


def plane_crossings(geom, origin, direction, length):
    """Sorted ray parameters in (0, length) where the ray crosses a grid plane."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    ts = [0.0, float(length)]
    for a in range(3):
        if d[a] == 0.0:
            continue
        planes = geom.origin[a] + geom.edge_length * np.arange(geom.dims[a] + 1)
        t = (planes - o[a]) / d[a]
        ts.extend(t[(t > 0) & (t < length)].tolist())
    return np.unique(ts)


def piecewise_midpoint(f, breaks, step):
    """Midpoint rule of a vectorised f on each piece between consecutive breaks."""
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(math.ceil((b - a) / step)))
        h = (b - a) / n
        total += h * float(np.sum(f(a + (np.arange(n) + 0.5) * h)))
    return total


def brute_nearest(points, sites):
    """Distance from every point to its nearest site, O(N*M)."""
    best = np.full(len(points), np.inf)
    for s in sites:
        best = np.minimum(best, np.linalg.norm(points - s, axis=1))
    return best
