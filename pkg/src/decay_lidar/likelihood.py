"""Measurement likelihoods under the decay-rate model.

Along a ray the survival probability is ``N(r) = exp(-sum_i rate_i * d_i)``
and the range density is ``rate_k * N(r)`` with ``k`` the endpoint voxel.
Out-of-range readings get absolute probabilities: ``1 - N(r_min)`` for SUB
and ``N(r_max)`` for SUP. Everything is evaluated in log space.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .grid import _locate, _trace
from .scan import RANGE, Measurement, Scan, rays_of

LOG_FLOOR = -40.0

DENSITY = "density"
PROBABILITY = "probability"


@dataclass(frozen=True)
class RayLikelihood:
    kind: str
    log_value: float

    @property
    def value(self) -> float:
        return math.exp(self.log_value) if self.log_value > -math.inf else 0.0


@dataclass(frozen=True)
class ScanLikelihood:
    log_value: float
    floored: int
    rays: int


@numba.njit(cache=True, nogil=True)
def _optical_depth(go, edge, dims, rate, prior, o, d, length, buf_i, buf_d):
    n = _trace(go, edge, dims, o, d, length, buf_i, buf_d, 0)
    depth = 0.0
    for s in range(n):
        v = buf_i[s]
        lam = prior if v < 0 else rate[v]
        depth += lam * buf_d[s]
    return depth


@numba.njit(cache=True, nogil=True)
def _decay_logs(go, edge, dims, rate, prior, origins, dirs, kinds, ranges, r_min, r_max,
                out, lo, hi):
    cap = dims[0] + dims[1] + dims[2] + 4
    buf_i = np.empty(cap, np.int64)
    buf_d = np.empty(cap)
    o = np.empty(3)
    d = np.empty(3)
    for j in range(lo, hi):
        for a in range(3):
            o[a] = origins[j, a]
            d[a] = dirs[j, a]
        k = kinds[j]
        if k == 1:
            r = ranges[j]
            depth = _optical_depth(go, edge, dims, rate, prior, o, d, r, buf_i, buf_d)
            v = _locate(go, edge, dims, o[0] + r * d[0], o[1] + r * d[1], o[2] + r * d[2])
            lam = prior if v < 0 else rate[v]
            if lam > 0.0:
                out[j] = math.log(lam) - depth
            else:
                out[j] = -np.inf
        elif k == 2:
            out[j] = -_optical_depth(go, edge, dims, rate, prior, o, d, r_max[j], buf_i, buf_d)
        else:
            depth = _optical_depth(go, edge, dims, rate, prior, o, d, r_min[j], buf_i, buf_d)
            if depth > 0.0:
                out[j] = math.log(-math.expm1(-depth))
            else:
                out[j] = -np.inf


def _run_chunked(kernel, n, threads, *args):
    """Fill a per-ray output with ``kernel(*args, out, lo, hi)`` over chunks."""
    out = np.empty(n, dtype=np.float64)
    threads = max(1, int(threads))
    if threads == 1 or n < 2 * threads:
        kernel(*args, out, 0, n)
        return out
    bounds = np.linspace(0, n, threads + 1).astype(np.int64)
    with ThreadPoolExecutor(threads) as pool:
        list(pool.map(lambda i: kernel(*args, out, int(bounds[i]), int(bounds[i + 1])),
                      range(threads)))
    return out


def _as_ray_arrays(origins, dirs, kinds, ranges, r_min, r_max):
    n = len(kinds)
    return (np.ascontiguousarray(origins, dtype=np.float64).reshape(n, 3),
            np.ascontiguousarray(dirs, dtype=np.float64).reshape(n, 3),
            np.ascontiguousarray(kinds, dtype=np.uint8),
            np.ascontiguousarray(ranges, dtype=np.float64),
            np.ascontiguousarray(np.broadcast_to(r_min, (n,)), dtype=np.float64),
            np.ascontiguousarray(np.broadcast_to(r_max, (n,)), dtype=np.float64))


def decay_ray_log_likelihoods(grid, origins, dirs, kinds, ranges, r_min, r_max, threads=1):
    """Unfloored per-ray log likelihoods (log density or log probability)."""
    o, d, k, r, rmin, rmax = _as_ray_arrays(origins, dirs, kinds, ranges, r_min, r_max)
    go, edge, dims = grid.geom.kernel_args()
    return _run_chunked(_decay_logs, len(k), threads, go, edge, dims, grid.rate,
                        grid.prior_rate, o, d, k, r, rmin, rmax)


def log_survival(grid, m: Measurement, r: float) -> float:
    """log N(r) along the measurement's ray."""
    if r < 0:
        raise ValueError(f"r must be >= 0, got {r}")
    go, edge, dims = grid.geom.kernel_args()
    cap = grid.geom.max_segments()
    depth = _optical_depth(go, edge, dims, grid.rate, grid.prior_rate, m.origin,
                           m.world_direction, float(r), np.empty(cap, np.int64), np.empty(cap))
    return -depth


def survival(grid, m: Measurement, r: float) -> float:
    """Probability that the ray travels at least ``r`` without reflection."""
    return math.exp(log_survival(grid, m, r))


def ray_density(grid, m: Measurement) -> RayLikelihood:
    """Density p(r) of a RANGE reading, in 1/m."""
    if m.kind != RANGE:
        raise ValueError("ray_density needs a RANGE reading")
    lv = _single(grid, m)
    return RayLikelihood(DENSITY, lv)


def out_of_range_prob(grid, m: Measurement) -> RayLikelihood:
    """Absolute probability of a SUB or SUP reading."""
    if m.kind == RANGE:
        raise ValueError("out_of_range_prob needs a SUB or SUP reading")
    return RayLikelihood(PROBABILITY, _single(grid, m))


def ray_likelihood(grid, m: Measurement) -> RayLikelihood:
    """Density for RANGE readings, probability otherwise; works for any map model."""
    kind = DENSITY if m.kind == RANGE else PROBABILITY
    return RayLikelihood(kind, _single(grid, m))


def _single(grid, m: Measurement) -> float:
    vals = grid.ray_log_likelihoods(m.origin[None, :], m.world_direction[None, :],
                                    np.array([m.kind], np.uint8), np.array([m.r]),
                                    m.r_min, m.r_max)
    return float(vals[0])


def density_profile(grid, m: Measurement, r_values) -> np.ndarray:
    """p(r) along the measurement's ray for many r at once (for plots and quadrature)."""
    r_values = np.asarray(r_values, dtype=np.float64).reshape(-1)
    n = len(r_values)
    o = np.broadcast_to(m.origin, (n, 3))
    d = np.broadcast_to(m.world_direction, (n, 3))
    logs = grid.ray_log_likelihoods(o, d, np.full(n, RANGE, np.uint8), r_values, 0.0,
                                    max(m.r_max, float(r_values.max(initial=0.0)) + 1.0))
    return np.exp(logs)


def floor_logs(logs, log_floor=LOG_FLOOR):
    """Apply the per-ray floor; returns (floored logs, number of floored rays)."""
    logs = np.asarray(logs, dtype=np.float64)
    if log_floor is None:
        return logs, 0
    low = ~(logs >= log_floor)
    return np.where(low, log_floor, logs), int(np.count_nonzero(low))


def scan_log_likelihood(grid, scan, log_floor=LOG_FLOOR, threads=1) -> ScanLikelihood:
    """Sum of per-ray log likelihoods for one or more scans.

    ``grid`` may be any map exposing ``ray_log_likelihoods`` (decay, reflection
    or endpoint model). Per-ray values below ``log_floor`` are floored and
    counted; pass ``log_floor=None`` to disable flooring.
    """
    if isinstance(scan, Scan):
        scans = [scan]
    elif isinstance(scan, Measurement):
        scans = []
        lv, fl = floor_logs([_single(grid, scan)], log_floor)
        return ScanLikelihood(float(lv[0]), fl, 1)
    else:
        scans = list(scan)
    if scans and isinstance(scans[0], Measurement):
        vals = np.array([_single(grid, m) for m in scans])
    else:
        o, d, k, r, rmin, rmax = rays_of(scans)
        if len(k) == 0:
            return ScanLikelihood(0.0, 0, 0)
        vals = grid.ray_log_likelihoods(o, d, k, r, rmin, rmax, threads=threads)
    vals, floored = floor_logs(vals, log_floor)
    return ScanLikelihood(float(np.sum(vals)), floored, len(vals))
