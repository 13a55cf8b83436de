"""Axis-aligned voxel grid and exact ray traversal.

Voxels are half-open boxes ``[origin + k*edge, origin + (k+1)*edge)`` on every
axis. Linear indices are x-fastest: ``i = ix + nx * (iy + ny * iz)``. Anything
beyond the grid extent is the single ``OUTSIDE`` region.

The traversal is an Amanatides-Woo style DDA, but every boundary crossing is
recomputed from the integer voxel index instead of being accumulated, so long
rays do not drift. When a ray hits an edge or a corner exactly, all tied axes
advance together and no zero-length segment is produced.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

OUTSIDE = -1

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class GridGeometry:
    origin: tuple[float, float, float]
    edge_length: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not (self.edge_length > 0 and math.isfinite(self.edge_length)):
            raise ValueError(f"edge_length must be positive, got {self.edge_length}")
        if any(n < 1 for n in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "edge_length", float(self.edge_length))

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        """Array shape for a C-ordered view of x-fastest data."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.edge_length * np.asarray(self.dims)

    def linear_index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def unravel(self, i):
        nx, ny, _ = self.dims
        i = np.asarray(i)
        return i % nx, (i // nx) % ny, i // (nx * ny)

    def voxel_center(self, i) -> np.ndarray:
        ix, iy, iz = self.unravel(i)
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.edge_length

    def centers(self) -> np.ndarray:
        """Centers of all voxels, shape (size, 3), in linear-index order."""
        return self.voxel_center(np.arange(self.size))

    def kernel_args(self):
        return (np.asarray(self.origin, dtype=np.float64), self.edge_length,
                np.asarray(self.dims, dtype=np.int64))

    def max_segments(self) -> int:
        nx, ny, nz = self.dims
        return nx + ny + nz + 4


@dataclass(frozen=True, eq=False)
class Traversal:
    """Per-voxel chord lengths of one ray, in travel order."""

    voxels: np.ndarray
    distances: np.ndarray
    total_length: float

    @property
    def segments(self) -> list[tuple[int, float]]:
        return [(int(v), float(d)) for v, d in zip(self.voxels, self.distances)]

    def __len__(self):
        return len(self.voxels)


# ---------------------------------------------------------------------------
# numba kernels

@numba.njit(cache=True, nogil=True)
def _locate(go, edge, dims, px, py, pz):
    fx = math.floor((px - go[0]) / edge)
    fy = math.floor((py - go[1]) / edge)
    fz = math.floor((pz - go[2]) / edge)
    if fx < 0 or fy < 0 or fz < 0 or fx >= dims[0] or fy >= dims[1] or fz >= dims[2]:
        return -1
    return int(fx) + dims[0] * (int(fy) + dims[1] * int(fz))


@numba.njit(cache=True, nogil=True)
def _emit(out_idx, out_dist, start, n, vox, d):
    # coalesce OUTSIDE runs, but never into the previous ray's segments
    if n > start and vox == -1 and out_idx[n - 1] == -1:
        out_dist[n - 1] += d
        return n
    out_idx[n] = vox
    out_dist[n] = d
    return n + 1


@numba.njit(cache=True, nogil=True)
def _trace(go, edge, dims, o, d, length, out_idx, out_dist, start):
    """Write the traversal of [o, o + length*d] at out[start:]; return the end."""
    n = start
    if not (length > 0.0):
        return n
    tin = -np.inf
    tout = np.inf
    for a in range(3):
        lo = go[a]
        hi = go[a] + dims[a] * edge
        if d[a] == 0.0:
            if not (lo <= o[a] < hi):
                tin = np.inf
        else:
            ta = (lo - o[a]) / d[a]
            tb = (hi - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > tin:
                tin = ta
            if tb < tout:
                tout = tb
    enter = max(tin, 0.0)
    leave = min(tout, length)
    if not (enter < leave):
        return _emit(out_idx, out_dist, start, n, -1, length)
    if enter > 0.0:
        n = _emit(out_idx, out_dist, start, n, -1, enter)

    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    for a in range(3):
        p = o[a] + enter * d[a]
        k = int(math.floor((p - go[a]) / edge))
        if k < 0:
            k = 0
        elif k >= dims[a]:
            k = dims[a] - 1
        idx[a] = k
        if d[a] > 0.0:
            step[a] = 1
        elif d[a] < 0.0:
            step[a] = -1
        else:
            step[a] = 0

    t = enter
    tnext = np.empty(3)
    while True:
        for a in range(3):
            if step[a] == 0:
                tnext[a] = np.inf
            else:
                plane = idx[a] + (1 if step[a] > 0 else 0)
                tnext[a] = (go[a] + plane * edge - o[a]) / d[a]
        tn = min(tnext[0], min(tnext[1], tnext[2]))
        vox = idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])
        if tn >= leave:
            if leave > t:
                n = _emit(out_idx, out_dist, start, n, vox, leave - t)
                t = leave
            break
        if tn > t:
            n = _emit(out_idx, out_dist, start, n, vox, tn - t)
            t = tn
        inside = True
        for a in range(3):
            if tnext[a] == tn:
                idx[a] += step[a]
                if idx[a] < 0 or idx[a] >= dims[a]:
                    inside = False
        if not inside:
            break
    if length > t:
        n = _emit(out_idx, out_dist, start, n, -1, length - t)
    return n


@numba.njit(cache=True, nogil=True)
def _trace_rays(go, edge, dims, origins, dirs, lengths, ends, hit_flags,
                hit_voxels, out_idx, out_dist, lo, hi, start, min_hit_dist):
    """Trace rays lo..hi into a flat buffer starting at ``start``.

    ``ends[j]`` receives the buffer end for ray j. For rays with ``hit_flags``
    set, ``hit_voxels[j]`` receives locate(endpoint) and the traversal is
    patched so the endpoint voxel carries at least ``min_hit_dist``.
    Returns the index of the first ray that did not fit (== hi when all did).
    """
    cap = out_idx.shape[0]
    per_ray = dims[0] + dims[1] + dims[2] + 5
    n = start
    o = np.empty(3)
    dv = np.empty(3)
    for j in range(lo, hi):
        if cap - n < per_ray:
            return j
        for a in range(3):
            o[a] = origins[j, a]
            dv[a] = dirs[j, a]
        first = n
        n = _trace(go, edge, dims, o, dv, lengths[j], out_idx, out_dist, n)
        if hit_flags[j]:
            L = lengths[j]
            k = _locate(go, edge, dims, o[0] + L * dv[0], o[1] + L * dv[1], o[2] + L * dv[2])
            hit_voxels[j] = k
            if n > first and out_idx[n - 1] == k:
                if out_dist[n - 1] < min_hit_dist:
                    out_dist[n - 1] = min_hit_dist
            else:
                out_idx[n] = k
                out_dist[n] = min_hit_dist
                n += 1
        else:
            hit_voxels[j] = -2
        ends[j] = n
    return hi


# ---------------------------------------------------------------------------
# Python API

def locate(geom: GridGeometry, point) -> int:
    """Linear index of the voxel containing ``point`` or ``OUTSIDE``."""
    go, edge, dims = geom.kernel_args()
    p = np.asarray(point, dtype=np.float64)
    return int(_locate(go, edge, dims, p[0], p[1], p[2]))


def locate_many(geom: GridGeometry, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = np.floor((pts - np.asarray(geom.origin)) / geom.edge_length)
    dims = np.asarray(geom.dims)
    ok = np.all((rel >= 0) & (rel < dims), axis=1)
    rel = np.where(ok[:, None], rel, 0).astype(np.int64)
    lin = geom.linear_index(rel[:, 0], rel[:, 1], rel[:, 2])
    return np.where(ok, lin, OUTSIDE)


def check_unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    norm = float(np.sqrt(d @ d))
    if not abs(norm - 1.0) <= _UNIT_TOL:
        raise ValueError(f"direction must have unit norm, got |d| = {norm!r}")
    return d


def trace_ray(geom: GridGeometry, origin, direction, length: float) -> Traversal:
    """Exact per-voxel distances along ``[origin, origin + length*direction]``.

    Raises:
        ValueError: if ``direction`` is not unit length within 1e-9 or
            ``length`` is negative.
    """
    d = check_unit(direction)
    if length < 0 or not math.isfinite(length):
        raise ValueError(f"length must be finite and >= 0, got {length}")
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    go, edge, dims = geom.kernel_args()
    cap = geom.max_segments()
    idx = np.empty(cap, np.int64)
    dist = np.empty(cap, np.float64)
    n = _trace(go, edge, dims, o, d, float(length), idx, dist, 0)
    return Traversal(idx[:n].copy(), dist[:n].copy(), float(length))


def normalize_rows(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class TraversalBlock:
    """Flattened traversals for a contiguous block of rays."""

    start: int
    offsets: np.ndarray   # length nrays + 1
    voxels: np.ndarray
    distances: np.ndarray
    hit_voxels: np.ndarray  # locate(endpoint) or -2 when not a hit


def iter_traversals(geom: GridGeometry, origins, dirs, lengths, hit_flags=None, *,
                    min_hit_dist: float = 0.0, block: int = 8192, threads: int = 1):
    """Trace many rays, yielding TraversalBlock objects in ray order.

    Tracing inside a block may run on several threads (the kernels release
    the GIL), but the yielded data does not depend on ``threads``.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    lengths = np.ascontiguousarray(lengths, dtype=np.float64).reshape(-1)
    nrays = len(lengths)
    if hit_flags is None:
        hit_flags = np.zeros(nrays, dtype=np.bool_)
    hit_flags = np.ascontiguousarray(hit_flags, dtype=np.bool_)
    go, edge, dims = geom.kernel_args()
    per_ray = geom.max_segments() + 1
    threads = max(1, int(threads))
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def run(lo, hi):
        parts = []
        cursor = lo
        while cursor < hi:
            est = _estimate_capacity(dirs[cursor:hi], lengths[cursor:hi], edge, per_ray)
            out_idx = np.empty(est, np.int64)
            out_dist = np.empty(est, np.float64)
            ends = np.zeros(hi - cursor, np.int64)
            hv = np.empty(hi - cursor, np.int64)
            done = _trace_rays(go, edge, dims, origins[cursor:hi], dirs[cursor:hi],
                               lengths[cursor:hi], ends, hit_flags[cursor:hi], hv,
                               out_idx, out_dist, 0, hi - cursor, 0, min_hit_dist)
            m = done
            used = ends[m - 1] if m > 0 else 0
            parts.append((ends[:m], out_idx[:used], out_dist[:used], hv[:m]))
            cursor += m
        return parts

    try:
        for b0 in range(0, nrays, block):
            b1 = min(nrays, b0 + block)
            bounds = np.linspace(b0, b1, threads + 1).astype(np.int64)
            chunks = [(int(bounds[i]), int(bounds[i + 1])) for i in range(threads)
                      if bounds[i + 1] > bounds[i]]
            if pool is None:
                results = [run(lo, hi) for lo, hi in chunks]
            else:
                results = list(pool.map(lambda c: run(*c), chunks))
            offsets = [np.zeros(1, np.int64)]
            vox, dist, hv = [], [], []
            base = 0
            for parts in results:
                for ends, oi, od, h in parts:
                    offsets.append(ends + base)
                    base += len(oi)
                    vox.append(oi)
                    dist.append(od)
                    hv.append(h)
            yield TraversalBlock(b0, np.concatenate(offsets), np.concatenate(vox),
                                 np.concatenate(dist), np.concatenate(hv))
    finally:
        if pool is not None:
            pool.shutdown()


def _estimate_capacity(dirs, lengths, edge, per_ray):
    # crossings along axis a are at most floor(L|d_a|/edge) + 1
    n = len(lengths)
    if n == 0:
        return per_ray
    span = np.minimum(lengths, 1e12)[:, None] * np.abs(dirs) / edge
    bound = np.minimum(span.sum(axis=1) + 8, per_ray)
    return int(bound.sum()) + per_ray
