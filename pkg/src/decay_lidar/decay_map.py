"""Decay-rate maps: accumulate hits and travelled distances, then finalize.

Each voxel stores the number of reflections recorded inside it and the total
distance all rays travelled inside it. The maximum-likelihood decay rate is
their ratio, so mapping reduces to ray tracing plus two scatter-adds.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .grid import GridGeometry, iter_traversals
from .scan import RANGE, SUB, SUP, Measurement, Scan, rays_of

log = logging.getLogger(__name__)

DEFAULT_PRIOR_RATE = 0.05
DEFAULT_RATE_CAP = 1e4
MIN_HIT_DISTANCE = 1e-9


@dataclass
class MappingStats:
    rays: int = 0
    range_rays: int = 0
    sup_rays: int = 0
    skipped_sub: int = 0

    def add(self, other: MappingStats):
        self.rays += other.rays
        self.range_rays += other.range_rays
        self.sup_rays += other.sup_rays
        self.skipped_sub += other.skipped_sub


@dataclass(eq=False)
class MapAccumulator:
    """Per-voxel hit counts and travelled distance sums."""

    geom: GridGeometry
    hits: np.ndarray = None
    dist: np.ndarray = None
    outside_hits: int = 0
    outside_dist: float = 0.0
    stats: MappingStats = field(default_factory=MappingStats)

    def __post_init__(self):
        if self.hits is None:
            self.hits = np.zeros(self.geom.size, dtype=np.int64)
        if self.dist is None:
            self.dist = np.zeros(self.geom.size, dtype=np.float64)
        if self.hits.shape != (self.geom.size,) or self.dist.shape != (self.geom.size,):
            raise ValueError("accumulator arrays do not match the grid size")

    def copy(self) -> MapAccumulator:
        st = MappingStats(**vars(self.stats))
        return MapAccumulator(self.geom, self.hits.copy(), self.dist.copy(),
                              self.outside_hits, self.outside_dist, st)

    def integrate(self, m: Measurement) -> MapAccumulator:
        return integrate_measurement(self, m)

    def integrate_scans(self, scans, threads: int = 1) -> MapAccumulator:
        return integrate_scans(self, scans, threads=threads)

    def finalize(self, prior_rate=DEFAULT_PRIOR_RATE, unobserved_rate=None,
                 rate_cap=DEFAULT_RATE_CAP) -> DecayGrid:
        return finalize(self, prior_rate, unobserved_rate, rate_cap)


@dataclass(frozen=True, eq=False)
class DecayGrid:
    """Decay rate per voxel (1/m) plus the rate assumed outside the grid."""

    geom: GridGeometry
    rate: np.ndarray
    prior_rate: float = DEFAULT_PRIOR_RATE
    unobserved_rate: float = DEFAULT_PRIOR_RATE

    def __post_init__(self):
        rate = np.ascontiguousarray(self.rate, dtype=np.float64).reshape(-1)
        if rate.shape != (self.geom.size,):
            raise ValueError(f"rate has {rate.size} entries, grid has {self.geom.size}")
        if not np.all(np.isfinite(rate)) or np.any(rate < 0):
            raise ValueError("decay rates must be finite and non-negative")
        if not (self.prior_rate >= 0 and self.unobserved_rate >= 0):
            raise ValueError("prior and unobserved rates must be non-negative")
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "prior_rate", float(self.prior_rate))
        object.__setattr__(self, "unobserved_rate", float(self.unobserved_rate))

    @classmethod
    def uniform(cls, geom: GridGeometry, rate: float, prior_rate: float | None = None):
        prior = rate if prior_rate is None else prior_rate
        return cls(geom, np.full(geom.size, float(rate)), prior, prior)

    def mean_free_path(self) -> np.ndarray:
        """1/rate per voxel, inf where the rate is zero."""
        with np.errstate(divide="ignore"):
            return np.where(self.rate > 0, 1.0 / np.where(self.rate > 0, self.rate, 1.0), np.inf)

    def rate_at(self, voxel: int) -> float:
        return self.prior_rate if voxel < 0 else float(self.rate[voxel])

    def volume(self) -> np.ndarray:
        """Rates as an (nz, ny, nx) view."""
        return self.rate.reshape(self.geom.shape_zyx)

    def with_rates(self, rate) -> DecayGrid:
        return DecayGrid(self.geom, rate, self.prior_rate, self.unobserved_rate)

    def ray_log_likelihoods(self, origins, dirs, kinds, ranges, r_min, r_max, threads=1):
        from .likelihood import decay_ray_log_likelihoods
        return decay_ray_log_likelihoods(self, origins, dirs, kinds, ranges, r_min, r_max,
                                         threads=threads)


@numba.njit(cache=True)
def _scatter(offsets, voxels, distances, hit_voxels, hits, dist, outside):
    # outside[0] = hits, outside[1] = distance
    nrays = offsets.shape[0] - 1
    for j in range(nrays):
        for s in range(offsets[j], offsets[j + 1]):
            v = voxels[s]
            if v < 0:
                outside[1] += distances[s]
            else:
                dist[v] += distances[s]
        k = hit_voxels[j]
        if k >= 0:
            hits[k] += 1
        elif k == -1:
            outside[0] += 1.0


def _accumulate_rays(acc: MapAccumulator, origins, dirs, kinds, ranges, r_min, r_max,
                     threads=1):
    kinds = np.asarray(kinds)
    keep = kinds != SUB
    st = MappingStats(rays=len(kinds), range_rays=int(np.sum(kinds == RANGE)),
                      sup_rays=int(np.sum(kinds == SUP)), skipped_sub=int(np.sum(~keep)))
    if not np.all(keep):
        origins, dirs, kinds = origins[keep], dirs[keep], kinds[keep]
        ranges, r_max = ranges[keep], r_max[keep]
    is_hit = kinds == RANGE
    lengths = np.where(is_hit, ranges, r_max)
    outside = np.array([float(acc.outside_hits), acc.outside_dist])
    for blk in iter_traversals(acc.geom, origins, dirs, lengths, is_hit,
                               min_hit_dist=MIN_HIT_DISTANCE, threads=threads):
        _scatter(blk.offsets, blk.voxels, blk.distances, blk.hit_voxels,
                 acc.hits, acc.dist, outside)
    acc.outside_hits = int(outside[0])
    acc.outside_dist = float(outside[1])
    acc.stats.add(st)
    return acc


def integrate_measurement(acc: MapAccumulator, m: Measurement) -> MapAccumulator:
    """Add one ray to the accumulator (in place) and return it.

    RANGE rays add their path up to r and a hit in the endpoint voxel; SUP rays
    add their path up to r_max and no hit; SUB rays are skipped and counted in
    ``acc.stats.skipped_sub``.
    """
    origin = m.origin[None, :]
    d = m.world_direction[None, :]
    return _accumulate_rays(acc, origin, d, np.array([m.kind], np.uint8),
                            np.array([m.r]), np.array([m.r_min]), np.array([m.r_max]))


def integrate_scans(acc: MapAccumulator, scans, threads: int = 1) -> MapAccumulator:
    if isinstance(scans, Scan):
        scans = [scans]
    for scan in scans:
        o, d, k, r, rmin, rmax = rays_of([scan])
        _accumulate_rays(acc, o, d, k, r, rmin, rmax, threads=threads)
    return acc


def build_decay_map(scans, geom: GridGeometry, prior_rate=DEFAULT_PRIOR_RATE,
                    unobserved_rate=None, rate_cap=DEFAULT_RATE_CAP, threads=1) -> DecayGrid:
    acc = integrate_scans(MapAccumulator(geom), scans, threads=threads)
    return finalize(acc, prior_rate, unobserved_rate, rate_cap)


def finalize(acc: MapAccumulator, prior_rate=DEFAULT_PRIOR_RATE, unobserved_rate=None,
             rate_cap=DEFAULT_RATE_CAP) -> DecayGrid:
    """Maximum-likelihood decay rates hits/dist, capped at ``rate_cap``.

    Voxels no ray ever entered get ``unobserved_rate`` (defaults to
    ``prior_rate``).
    """
    if unobserved_rate is None:
        unobserved_rate = prior_rate
    if prior_rate < 0 or unobserved_rate < 0:
        raise ValueError("prior_rate and unobserved_rate must be >= 0")
    seen = acc.dist > 0
    rate = np.full(acc.geom.size, float(unobserved_rate))
    rate[seen] = np.minimum(acc.hits[seen] / acc.dist[seen], rate_cap)
    return DecayGrid(acc.geom, rate, prior_rate, unobserved_rate)


def merge(a: MapAccumulator, b: MapAccumulator) -> MapAccumulator:
    """Elementwise sum of two accumulators over the same grid."""
    if a.geom != b.geom:
        raise ValueError(f"cannot merge accumulators over different grids: {a.geom} vs {b.geom}")
    st = MappingStats(**vars(a.stats))
    st.add(b.stats)
    return MapAccumulator(a.geom, a.hits + b.hits, a.dist + b.dist,
                          a.outside_hits + b.outside_hits, a.outside_dist + b.outside_dist, st)
