"""Baseline sensor models: reflection maps and likelihood fields.

Both baselines produce outputs commensurable with the decay model: densities
(1/m) for RANGE readings and absolute probabilities for SUB/SUP readings.

Reflection model. A voxel reflects a ray with probability q = H/(H+M). The
probability of a ray ending in voxel k is q_k times the product of (1 - q_i)
over the voxels before it. It becomes a density by spreading it uniformly
over the chord of the ray through v_k. Space outside the grid is treated as
a fine lattice with cell size ``edge_length`` and reflection probability
``prior_q``, i.e. as an exponential medium of rate -log(1 - prior_q)/edge.

Endpoint model. A Gaussian of the distance between the ray endpoint and the
nearest endpoint recorded during mapping, normalised per ray over the sensor
range so that it integrates to 1 - p_oor; SUB and SUP each get p_oor / 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .grid import GridGeometry, _locate, _trace, iter_traversals, trace_ray
from .likelihood import DENSITY, PROBABILITY, RayLikelihood, _as_ray_arrays, _run_chunked
from .scan import RANGE, SUB, Measurement, Scan, rays_of

MIN_CHORD = 1e-9
SQRT3 = math.sqrt(3.0)


# ---------------------------------------------------------------------------
# reflection model

@dataclass(frozen=True, eq=False)
class ReflectionGrid:
    geom: GridGeometry
    q: np.ndarray
    hits: np.ndarray
    misses: np.ndarray
    prior_q: float = 0.05
    unobserved_q: float = 0.05

    def __post_init__(self):
        q = np.ascontiguousarray(self.q, dtype=np.float64).reshape(-1)
        if q.shape != (self.geom.size,):
            raise ValueError("q does not match the grid size")
        if np.any(~(q >= 0) | (q > 1)):
            raise ValueError("reflection probabilities must lie in [0, 1]")
        if not (0 <= self.prior_q < 1 and 0 <= self.unobserved_q <= 1):
            raise ValueError("prior_q must be in [0, 1) and unobserved_q in [0, 1]")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "hits", np.ascontiguousarray(self.hits, dtype=np.int64))
        object.__setattr__(self, "misses", np.ascontiguousarray(self.misses, dtype=np.int64))

    @classmethod
    def from_q(cls, geom, q, prior_q=0.05):
        n = geom.size
        return cls(geom, np.broadcast_to(q, (n,)), np.zeros(n, np.int64), np.zeros(n, np.int64),
                   prior_q, prior_q)

    @property
    def outside_rate(self) -> float:
        return -math.log1p(-self.prior_q) / self.geom.edge_length

    def ray_log_likelihoods(self, origins, dirs, kinds, ranges, r_min, r_max, threads=1):
        o, d, k, r, rmin, rmax = _as_ray_arrays(origins, dirs, kinds, ranges, r_min, r_max)
        go, edge, dims = self.geom.kernel_args()
        return _run_chunked(_reflection_logs, len(k), threads, go, edge, dims, self.q,
                            self.outside_rate, True, o, d, k, r, rmin, rmax)


@numba.njit(cache=True)
def _count_hits_misses(offsets, voxels, distances, hit_voxels, hits, misses):
    for j in range(offsets.shape[0] - 1):
        k = hit_voxels[j]
        for s in range(offsets[j], offsets[j + 1]):
            v = voxels[s]
            if v >= 0 and v != k and distances[s] > 0.0:
                misses[v] += 1
        if k >= 0:
            hits[k] += 1


def build_reflection_map(scans, geom: GridGeometry, prior_q=0.05, unobserved_q=None,
                         threads=1) -> ReflectionGrid:
    """Count hits and misses per voxel and set q = H / (H + M)."""
    if unobserved_q is None:
        unobserved_q = prior_q
    if isinstance(scans, Scan):
        scans = [scans]
    hits = np.zeros(geom.size, np.int64)
    misses = np.zeros(geom.size, np.int64)
    for scan in scans:
        o, d, k, r, _, rmax = rays_of([scan])
        keep = k != SUB
        is_hit = k[keep] == RANGE
        lengths = np.where(is_hit, r[keep], rmax[keep])
        for blk in iter_traversals(geom, o[keep], d[keep], lengths, is_hit, threads=threads):
            _count_hits_misses(blk.offsets, blk.voxels, blk.distances, blk.hit_voxels,
                               hits, misses)
    total = hits + misses
    q = np.full(geom.size, float(unobserved_q))
    seen = total > 0
    q[seen] = hits[seen] / total[seen]
    return ReflectionGrid(geom, q, hits, misses, prior_q, unobserved_q)


@numba.njit(cache=True, nogil=True)
def _log1m(x):
    if x >= 1.0:
        return -np.inf
    return math.log1p(-x)


@numba.njit(cache=True, nogil=True)
def _refl_log_survival(buf_i, buf_d, n, r, q, lam_out):
    """log P(no reflection before r), density uniform within each voxel chord."""
    acc = 0.0
    s = 0.0
    for t in range(n):
        v = buf_i[t]
        L = buf_d[t]
        if s + L <= r:
            if v < 0:
                acc -= lam_out * L
            else:
                acc += _log1m(q[v])
            s += L
        else:
            part = r - s
            if part > 0.0:
                if v < 0:
                    acc -= lam_out * part
                else:
                    acc += _log1m(q[v] * part / L)
            break
    return acc


@numba.njit(cache=True, nogil=True)
def _refl_log_endpoint(go, edge, dims, buf_i, buf_d, n, o, d, r, q, lam_out, as_density):
    k = _locate(go, edge, dims, o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2])
    acc = 0.0
    s = 0.0
    if k < 0:
        # exponential medium outside the grid
        for t in range(n):
            v = buf_i[t]
            L = buf_d[t]
            if s >= r:
                break
            seg = min(L, r - s)
            if v < 0:
                acc -= lam_out * seg
            elif s + L <= r:
                acc += _log1m(q[v])
            s += L
        if lam_out <= 0.0:
            return -np.inf
        if as_density:
            return acc + math.log(lam_out)
        return acc + _log1m(math.exp(-lam_out * edge))
    chord = -1.0
    for t in range(n):
        v = buf_i[t]
        L = buf_d[t]
        if v == k:
            chord = L
            break
        if s + L > r:
            break
        if v < 0:
            acc -= lam_out * L
        else:
            acc += _log1m(q[v])
        s += L
    if chord < MIN_CHORD:
        chord = MIN_CHORD
    if q[k] <= 0.0:
        return -np.inf
    acc += math.log(q[k])
    if as_density:
        acc -= math.log(chord)
    return acc


@numba.njit(cache=True, nogil=True)
def _reflection_logs(go, edge, dims, q, lam_out, as_density, origins, dirs, kinds, ranges,
                     r_min, r_max, out, lo, hi):
    cap = dims[0] + dims[1] + dims[2] + 4
    buf_i = np.empty(cap, np.int64)
    buf_d = np.empty(cap)
    o = np.empty(3)
    d = np.empty(3)
    extra = edge * SQRT3 * 1.01
    for j in range(lo, hi):
        for a in range(3):
            o[a] = origins[j, a]
            d[a] = dirs[j, a]
        k = kinds[j]
        if k == 1:
            r = ranges[j]
        elif k == 2:
            r = r_max[j]
        else:
            r = r_min[j]
        n = _trace(go, edge, dims, o, d, r + extra, buf_i, buf_d, 0)
        if k == 1:
            out[j] = _refl_log_endpoint(go, edge, dims, buf_i, buf_d, n, o, d, r, q,
                                        lam_out, as_density)
        elif k == 2:
            out[j] = _refl_log_survival(buf_i, buf_d, n, r, q, lam_out)
        else:
            ls = _refl_log_survival(buf_i, buf_d, n, r, q, lam_out)
            out[j] = math.log(-math.expm1(ls)) if ls < 0.0 else -np.inf


def _refl_single(rmap: ReflectionGrid, m: Measurement, as_density: bool) -> float:
    o, d, k, r, rmin, rmax = _as_ray_arrays(m.origin[None, :], m.world_direction[None, :],
                                            np.array([m.kind], np.uint8), np.array([m.r]),
                                            m.r_min, m.r_max)
    go, edge, dims = rmap.geom.kernel_args()
    out = np.empty(1)
    _reflection_logs(go, edge, dims, rmap.q, rmap.outside_rate, as_density, o, d, k, r,
                     rmin, rmax, out, 0, 1)
    return float(out[0])


def reflection_ray_prob(rmap: ReflectionGrid, m: Measurement) -> RayLikelihood:
    """Probability that the ray ends in the voxel containing its endpoint."""
    if m.kind != RANGE:
        raise ValueError("reflection_ray_prob needs a RANGE reading")
    return RayLikelihood(PROBABILITY, _refl_single(rmap, m, False))


def reflection_to_density(rmap: ReflectionGrid, m: Measurement) -> RayLikelihood:
    """Endpoint-voxel probability divided by the ray's chord through that voxel."""
    if m.kind != RANGE:
        raise ValueError("reflection_to_density needs a RANGE reading")
    return RayLikelihood(DENSITY, _refl_single(rmap, m, True))


def endpoint_chord(geom: GridGeometry, m: Measurement) -> float:
    """Length of the full chord of the ray through its endpoint voxel."""
    d = m.world_direction
    end = m.endpoint
    k = _locate(*geom.kernel_args(), *end)
    if k < 0:
        return geom.edge_length
    tr = trace_ray(geom, m.origin, d, m.r + geom.edge_length * SQRT3 * 1.01)
    hit = tr.distances[tr.voxels == k]
    return max(float(hit[0]), MIN_CHORD) if len(hit) else MIN_CHORD


# ---------------------------------------------------------------------------
# endpoint model

@dataclass(frozen=True, eq=False)
class LikelihoodField:
    geom: GridGeometry
    nearest_dist: np.ndarray
    sigma: float = 0.2
    p_oor: float = 0.1

    def __post_init__(self):
        nd = np.ascontiguousarray(self.nearest_dist, dtype=np.float64).reshape(-1)
        if nd.shape != (self.geom.size,):
            raise ValueError("nearest_dist does not match the grid size")
        if np.any(~(nd >= 0)):
            raise ValueError("nearest distances must be >= 0")
        if not (self.sigma > 0):
            raise ValueError("sigma must be positive")
        if not (0 < self.p_oor < 1):
            raise ValueError("p_oor must lie in (0, 1)")
        object.__setattr__(self, "nearest_dist", nd)

    def score(self, points) -> np.ndarray:
        """Unnormalised Gaussian score g at world points."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        go, edge, dims = self.geom.kernel_args()
        out = np.empty(len(pts))
        _field_scores(go, edge, dims, self.nearest_dist, 1.0 / (2 * self.sigma ** 2), pts, out)
        return out

    def ray_log_likelihoods(self, origins, dirs, kinds, ranges, r_min, r_max, threads=1):
        o, d, k, r, rmin, rmax = _as_ray_arrays(origins, dirs, kinds, ranges, r_min, r_max)
        go, edge, dims = self.geom.kernel_args()
        return _run_chunked(_endpoint_logs, len(k), threads, go, edge, dims, self.nearest_dist,
                            1.0 / (2 * self.sigma ** 2), self.p_oor, o, d, k, r, rmin, rmax)


@numba.njit(cache=True, nogil=True)
def _field_dist(go, edge, dims, nd, px, py, pz):
    # nothing is mapped outside the grid, so the score there is zero
    v = _locate(go, edge, dims, px, py, pz)
    return nd[v] if v >= 0 else np.inf


@numba.njit(cache=True, nogil=True)
def _field_scores(go, edge, dims, nd, inv2s2, pts, out):
    for j in range(pts.shape[0]):
        dd = _field_dist(go, edge, dims, nd, pts[j, 0], pts[j, 1], pts[j, 2])
        out[j] = math.exp(-dd * dd * inv2s2)


@numba.njit(cache=True, nogil=True)
def _ray_normalizer(go, edge, dims, nd, inv2s2, o, d, r_min, r_max, buf_i, buf_d):
    """Midpoint rule at step edge/4 over [r_min, r_max].

    The score is constant per voxel and zero outside the grid, so nodes are
    counted per traversal segment instead of located one by one.
    """
    span = r_max - r_min
    steps = max(1, int(math.ceil(span / (edge / 4.0) - 1e-9)))
    h = span / steps
    n = _trace(go, edge, dims, o, d, r_max, buf_i, buf_d, 0)
    z = 0.0
    t0 = 0.0
    i0 = 0
    for s in range(n):
        t1 = t0 + buf_d[s]
        i1 = steps if s == n - 1 else min(max(int(math.ceil((t1 - r_min) / h - 0.5)), 0), steps)
        if i1 > i0:
            v = buf_i[s]
            if v >= 0:
                z += (i1 - i0) * math.exp(-nd[v] * nd[v] * inv2s2)
            i0 = i1
        t0 = t1
    if i0 < steps:
        # degenerate trace (zero-length ray); fall back to direct evaluation
        for i in range(i0, steps):
            r = r_min + (i + 0.5) * h
            dd = _field_dist(go, edge, dims, nd, o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2])
            z += math.exp(-dd * dd * inv2s2)
    return z * h


@numba.njit(cache=True, nogil=True)
def _ray_normalizer_direct(go, edge, dims, nd, inv2s2, o, d, r_min, r_max):
    span = r_max - r_min
    steps = max(1, int(math.ceil(span / (edge / 4.0) - 1e-9)))
    h = span / steps
    z = 0.0
    for i in range(steps):
        r = r_min + (i + 0.5) * h
        dd = _field_dist(go, edge, dims, nd, o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2])
        z += math.exp(-dd * dd * inv2s2)
    return z * h


@numba.njit(cache=True, nogil=True)
def _endpoint_logs(go, edge, dims, nd, inv2s2, p_oor, origins, dirs, kinds, ranges,
                   r_min, r_max, out, lo, hi):
    o = np.empty(3)
    d = np.empty(3)
    cap = dims[0] + dims[1] + dims[2] + 4
    buf_i = np.empty(cap, np.int64)
    buf_d = np.empty(cap)
    half = math.log(p_oor / 2.0)
    for j in range(lo, hi):
        if kinds[j] != 1:
            out[j] = half
            continue
        for a in range(3):
            o[a] = origins[j, a]
            d[a] = dirs[j, a]
        r = ranges[j]
        dd = _field_dist(go, edge, dims, nd, o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2])
        z = _ray_normalizer(go, edge, dims, nd, inv2s2, o, d, r_min[j], r_max[j], buf_i, buf_d)
        g = -dd * dd * inv2s2
        if z > 0.0:
            out[j] = math.log1p(-p_oor) + g - math.log(z)
        else:
            out[j] = -np.inf


def endpoint_quadrature(field: LikelihoodField, m: Measurement):
    """Quadrature nodes and step used to normalise the endpoint model along a ray."""
    span = m.r_max - m.r_min
    steps = max(1, int(math.ceil(span / (field.geom.edge_length / 4.0) - 1e-9)))
    h = span / steps
    return m.r_min + (np.arange(steps) + 0.5) * h, h


def build_likelihood_field(scans, geom: GridGeometry, sigma=0.2, p_oor=0.1) -> LikelihoodField:
    """Exact Euclidean distance from every voxel center to the nearest endpoint voxel.

    Raises:
        ValueError: if no RANGE endpoint falls inside the grid.
    """
    if isinstance(scans, Scan):
        scans = [scans]
    occupied = np.zeros(geom.size, dtype=bool)
    for scan in scans:
        pts = scan.endpoints()
        if len(pts):
            go, edge, dims = geom.kernel_args()
            idx = _locate_batch(go, edge, dims, np.ascontiguousarray(pts))
            idx = idx[idx >= 0]
            occupied[idx] = True
    if not occupied.any():
        raise ValueError("likelihood field needs at least one RANGE endpoint inside the grid")
    return LikelihoodField(geom, distance_field(geom, occupied), sigma, p_oor)


@numba.njit(cache=True)
def _locate_batch(go, edge, dims, pts):
    out = np.empty(pts.shape[0], np.int64)
    for j in range(pts.shape[0]):
        out[j] = _locate(go, edge, dims, pts[j, 0], pts[j, 1], pts[j, 2])
    return out


def distance_field(geom: GridGeometry, occupied) -> np.ndarray:
    """Euclidean distance transform of an occupied-voxel mask, in meters."""
    mask = np.asarray(occupied, dtype=bool).reshape(geom.shape_zyx)
    nd = ndimage.distance_transform_edt(~mask, sampling=geom.edge_length)
    return np.ascontiguousarray(nd.reshape(-1), dtype=np.float64)


def endpoint_ray_density(field: LikelihoodField, m: Measurement) -> RayLikelihood:
    lv = float(field.ray_log_likelihoods(m.origin[None, :], m.world_direction[None, :],
                                         np.array([m.kind], np.uint8), np.array([m.r]),
                                         m.r_min, m.r_max)[0])
    return RayLikelihood(DENSITY if m.kind == RANGE else PROBABILITY, lv)
