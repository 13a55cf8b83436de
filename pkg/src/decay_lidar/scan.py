"""Lidar readings.

A reading is SUB (reflection closer than ``r_min``), RANGE (a distance in
``[r_min, r_max]``) or SUP (no reflection up to ``r_max``). Scans store their
ray directions and ranges as float32, the precision of the scan file, so a
scan survives a write/read cycle unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transforms import Pose

SUB = 0
RANGE = 1
SUP = 2

KIND_NAMES = {SUB: "sub", RANGE: "range", SUP: "sup"}


def world_directions(pose: Pose, dirs) -> np.ndarray:
    """Unit world-frame directions for sensor-frame directions (n, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    d = pose.rotate(d)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _check_limits(r_min, r_max):
    if not (0.0 <= r_min < r_max) or not np.isfinite(r_max):
        raise ValueError(f"sensor limits must satisfy 0 <= r_min < r_max, got {r_min}, {r_max}")


@dataclass(frozen=True, eq=False)
class Measurement:
    """One ray: sensor pose, sensor-frame direction and reading."""

    pose: Pose
    direction: np.ndarray
    kind: int
    r: float
    r_min: float
    r_max: float

    def __post_init__(self):
        _check_limits(self.r_min, self.r_max)
        if self.kind not in (SUB, RANGE, SUP):
            raise ValueError(f"invalid reading kind {self.kind!r}")
        if self.kind == RANGE and not (self.r_min <= self.r <= self.r_max):
            raise ValueError(f"range {self.r} outside [{self.r_min}, {self.r_max}]")
        d = np.asarray(self.direction, dtype=np.float64).reshape(1, 3)
        object.__setattr__(self, "direction", (d / np.linalg.norm(d, axis=1, keepdims=True))[0])

    @classmethod
    def range(cls, pose, direction, r, r_min=0.0, r_max=100.0):
        return cls(pose, direction, RANGE, float(r), r_min, r_max)

    @classmethod
    def sub(cls, pose, direction, r_min=0.0, r_max=100.0):
        return cls(pose, direction, SUB, 0.0, r_min, r_max)

    @classmethod
    def sup(cls, pose, direction, r_min=0.0, r_max=100.0):
        return cls(pose, direction, SUP, 0.0, r_min, r_max)

    @property
    def origin(self) -> np.ndarray:
        return self.pose.position

    @property
    def world_direction(self) -> np.ndarray:
        return world_directions(self.pose, self.direction)[0]

    @property
    def endpoint(self) -> np.ndarray:
        if self.kind != RANGE:
            raise ValueError("only RANGE readings have an endpoint")
        return self.origin + self.r * self.world_direction


@dataclass(eq=False)
class Scan:
    """All rays recorded from one sensor pose."""

    pose: Pose
    directions: np.ndarray
    kinds: np.ndarray
    ranges: np.ndarray
    r_min: float
    r_max: float
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_limits(self.r_min, self.r_max)
        self.directions = np.ascontiguousarray(self.directions, dtype=np.float32).reshape(-1, 3)
        self.kinds = np.ascontiguousarray(self.kinds, dtype=np.uint8).reshape(-1)
        self.ranges = np.ascontiguousarray(self.ranges, dtype=np.float32).reshape(-1)
        n = len(self.directions)
        if len(self.kinds) != n or len(self.ranges) != n:
            raise ValueError("directions, kinds and ranges must have equal length")
        if np.any(self.kinds > SUP):
            raise ValueError("reading kinds must be 0 (sub), 1 (range) or 2 (sup)")

    def __len__(self):
        return len(self.kinds)

    def world_rays(self):
        """Origins (n, 3) and unit world-frame directions (n, 3) in float64."""
        dirs = world_directions(self.pose, self.directions)
        origins = np.broadcast_to(self.pose.position, dirs.shape)
        return np.ascontiguousarray(origins), dirs

    def measurement(self, j: int) -> Measurement:
        return Measurement(self.pose, self.directions[j].astype(np.float64), int(self.kinds[j]),
                           float(self.ranges[j]), self.r_min, self.r_max)

    def measurements(self):
        for j in range(len(self)):
            yield self.measurement(j)

    def subsample(self, stride: int) -> Scan:
        s = slice(None, None, int(stride))
        return Scan(self.pose, self.directions[s], self.kinds[s], self.ranges[s],
                    self.r_min, self.r_max)

    def with_pose(self, pose: Pose) -> Scan:
        return Scan(pose, self.directions, self.kinds, self.ranges, self.r_min, self.r_max)

    def kind_counts(self) -> dict:
        counts = np.bincount(self.kinds, minlength=3)
        return {KIND_NAMES[k]: int(counts[k]) for k in (SUB, RANGE, SUP)}

    def endpoints(self) -> np.ndarray:
        """World-frame endpoints of RANGE readings."""
        origins, dirs = self.world_rays()
        m = self.kinds == RANGE
        return origins[m] + dirs[m] * self.ranges[m, None].astype(np.float64)

    def equals(self, other: Scan) -> bool:
        return (self.r_min == other.r_min and self.r_max == other.r_max
                and np.array_equal(self.pose.as_array(), other.pose.as_array())
                and np.array_equal(self.directions, other.directions)
                and np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.ranges, other.ranges))


def scan_from_measurements(measurements) -> Scan:
    """Pack measurements that share one pose and sensor limits into a Scan."""
    ms = list(measurements)
    if not ms:
        raise ValueError("need at least one measurement")
    m0 = ms[0]
    return Scan(m0.pose, [m.direction for m in ms], [m.kind for m in ms],
                [m.r for m in ms], m0.r_min, m0.r_max)


def rays_of(scans):
    """Concatenate world-frame rays of several scans.

    Returns origins, directions, kinds, ranges (float64), r_min and r_max
    arrays with one entry per ray.
    """
    scans = list(scans)
    if not scans:
        z = np.zeros((0, 3))
        e = np.zeros(0)
        return z, z.copy(), np.zeros(0, np.uint8), e, e.copy(), e.copy()
    origins, dirs, kinds, ranges, rmin, rmax = [], [], [], [], [], []
    for s in scans:
        o, d = s.world_rays()
        origins.append(o)
        dirs.append(d)
        kinds.append(s.kinds)
        ranges.append(s.ranges.astype(np.float64))
        rmin.append(np.full(len(s), s.r_min))
        rmax.append(np.full(len(s), s.r_max))
    return (np.concatenate(origins), np.concatenate(dirs), np.concatenate(kinds),
            np.concatenate(ranges), np.concatenate(rmin), np.concatenate(rmax))
