"""Synthetic worlds and scans drawn from the decay-rate forward model.

Random numbers come from Philox, a counter-based generator. Every scan gets
its own stream keyed by (seed, purpose, scan index) and ray j consumes the
j-th draw of that stream, so output does not depend on batching or threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .decay_map import DecayGrid
from .grid import GridGeometry, _trace
from .scan import RANGE, SUB, SUP, Measurement, Scan
from .transforms import Pose, quat_from_yaw

STREAM_RAYS = 1
STREAM_FAILURES = 2
STREAM_FILTER = 3
STREAM_EVAL = 4
STREAM_ODOMETRY = 5


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Independent, reproducible Philox stream for (seed, purpose, index)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# worlds

@dataclass
class Primitive:
    """Box, sphere, vertical cylinder or rolling terrain with a constant decay rate.

    Boxes use ``center``, ``size`` (full extents) and ``yaw``; spheres use
    ``center`` and ``radius``; cylinders use ``center`` (bottom center),
    ``radius`` and ``height``. Terrain fills from ``center[2] - size[2]`` up to
    the surface ``center[2] + height * sin(2 pi x / radius) * sin(2 pi y / (1.37 radius))``
    over an x/y footprint of ``size[:2]`` around the center.
    """

    kind: str
    center: tuple
    rate: float
    size: tuple = (1.0, 1.0, 1.0)
    radius: float = 0.5
    height: float = 1.0
    yaw: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "cylinder", "terrain"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not self.rate >= 0:
            raise ValueError("primitive rate must be >= 0")
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)

    def bounds(self):
        c = np.asarray(self.center)
        if self.kind == "box":
            half = 0.5 * np.asarray(self.size)
            ext = np.abs(math.cos(self.yaw)) * half[0] + np.abs(math.sin(self.yaw)) * half[1]
            ey = np.abs(math.sin(self.yaw)) * half[0] + np.abs(math.cos(self.yaw)) * half[1]
            h = np.array([ext, ey, half[2]])
            return c - h, c + h
        if self.kind == "sphere":
            return c - self.radius, c + self.radius
        if self.kind == "terrain":
            sx, sy, depth = self.size
            return (c - np.array([sx / 2, sy / 2, depth]),
                    c + np.array([sx / 2, sy / 2, abs(self.height)]))
        lo = c - np.array([self.radius, self.radius, 0.0])
        hi = c + np.array([self.radius, self.radius, self.height])
        return lo, hi

    def contains(self, pts) -> np.ndarray:
        rel = pts - np.asarray(self.center)
        if self.kind == "box":
            cy, sy = math.cos(self.yaw), math.sin(self.yaw)
            lx = cy * rel[:, 0] + sy * rel[:, 1]
            ly = -sy * rel[:, 0] + cy * rel[:, 1]
            hx, hy, hz = 0.5 * np.asarray(self.size)
            return (np.abs(lx) <= hx) & (np.abs(ly) <= hy) & (np.abs(rel[:, 2]) <= hz)
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", rel, rel) <= self.radius ** 2
        if self.kind == "terrain":
            sx, sy, depth = self.size
            top = self.height * (np.sin(2 * np.pi * pts[:, 0] / self.radius)
                                 * np.sin(2 * np.pi * pts[:, 1] / (1.37 * self.radius)))
            return ((np.abs(rel[:, 0]) <= sx / 2) & (np.abs(rel[:, 1]) <= sy / 2)
                    & (rel[:, 2] >= -depth) & (rel[:, 2] <= top))
        return ((rel[:, 0] ** 2 + rel[:, 1] ** 2 <= self.radius ** 2)
                & (rel[:, 2] >= 0) & (rel[:, 2] <= self.height))


@dataclass
class WorldSpec:
    geom: GridGeometry
    primitives: list = field(default_factory=list)
    background_rate: float = 0.0
    prior_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.background_rate >= 0:
            raise ValueError("background_rate must be >= 0")


def rasterize_world(spec: WorldSpec) -> DecayGrid:
    """Voxel rates from primitive containment of voxel centers; later primitives win."""
    geom = spec.geom
    rate = np.full(geom.size, float(spec.background_rate))
    vol = rate.reshape(geom.shape_zyx)
    origin = np.asarray(geom.origin)
    e = geom.edge_length
    dims = np.asarray(geom.dims)
    for prim in spec.primitives:
        lo, hi = prim.bounds()
        i0 = np.clip(np.floor((lo - origin) / e - 0.5).astype(int), 0, dims)
        i1 = np.clip(np.ceil((hi - origin) / e + 0.5).astype(int), 0, dims)
        if np.any(i1 <= i0):
            continue
        ix = np.arange(i0[0], i1[0])
        iy = np.arange(i0[1], i1[1])
        iz = np.arange(i0[2], i1[2])
        zz, yy, xx = np.meshgrid(iz, iy, ix, indexing="ij")
        centers = origin + (np.stack([xx, yy, zz], axis=-1).reshape(-1, 3) + 0.5) * e
        inside = prim.contains(centers).reshape(zz.shape)
        sub = vol[i0[2]:i1[2], i0[1]:i1[1], i0[0]:i1[0]]
        sub[inside] = prim.rate
    prior = spec.background_rate if spec.prior_rate is None else spec.prior_rate
    return DecayGrid(geom, rate, prior, prior)


# ---------------------------------------------------------------------------
# scans

@dataclass
class ScanSpec:
    """Ray pattern and sensor limits; poses come from the trajectory."""

    azimuth_count: int = 180
    elevation_min_deg: float = -24.0
    elevation_max_deg: float = 2.0
    elevation_count: int = 16
    r_min: float = 0.5
    r_max: float = 30.0
    failure_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        if self.azimuth_count < 1 or self.elevation_count < 1:
            raise ValueError("ray pattern needs at least one azimuth and elevation")
        if not 0 <= self.r_min < self.r_max:
            raise ValueError("need 0 <= r_min < r_max")

    def directions(self) -> np.ndarray:
        az = np.arange(self.azimuth_count) * (2 * np.pi / self.azimuth_count)
        if self.elevation_count == 1:
            el = np.array([np.deg2rad(self.elevation_min_deg)])
        else:
            el = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg,
                                        self.elevation_count))
        A, E = np.meshgrid(az, el)
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3).astype(np.float32)


@numba.njit(cache=True, nogil=True)
def _sample_ranges(go, edge, dims, rate, prior, origins, dirs, r_max, depth_target, out):
    """Distance at which the optical depth reaches ``depth_target``; inf beyond r_max."""
    cap = dims[0] + dims[1] + dims[2] + 4
    buf_i = np.empty(cap, np.int64)
    buf_d = np.empty(cap)
    o = np.empty(3)
    d = np.empty(3)
    for j in range(origins.shape[0]):
        for a in range(3):
            o[a] = origins[j, a]
            d[a] = dirs[j, a]
        n = _trace(go, edge, dims, o, d, r_max[j], buf_i, buf_d, 0)
        target = depth_target[j]
        depth = 0.0
        s = 0.0
        res = np.inf
        for t in range(n):
            v = buf_i[t]
            lam = prior if v < 0 else rate[v]
            L = buf_d[t]
            if lam > 0.0 and depth + lam * L >= target:
                res = s + (target - depth) / lam
                break
            depth += lam * L
            s += L
        out[j] = res


def sample_ranges(world: DecayGrid, origins, dirs, r_max, u) -> np.ndarray:
    """Inverse-CDF reflection distances for uniforms ``u`` in (0, 1]; inf = no reflection."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(n, 3)
    rmax = np.ascontiguousarray(np.broadcast_to(r_max, (n,)), dtype=np.float64)
    target = -np.log(np.asarray(u, dtype=np.float64))
    out = np.empty(n)
    go, edge, dims = world.geom.kernel_args()
    _sample_ranges(go, edge, dims, world.rate, world.prior_rate, origins, dirs, rmax,
                   np.ascontiguousarray(target), out)
    return out


def classify(r, r_min, r_max):
    """Kinds and float32 ranges for raw reflection distances."""
    r32 = np.where(np.isfinite(r), r, 0.0).astype(np.float32)
    kinds = np.full(len(r32), RANGE, np.uint8)
    kinds[~np.isfinite(r) | (r32 > r_max)] = SUP
    kinds[np.isfinite(r) & (r32 < r_min)] = SUB
    r32[kinds != RANGE] = 0.0
    return kinds, r32


def sample_scan(world: DecayGrid, pose: Pose, directions, r_min, r_max,
                rng: np.random.Generator) -> Scan:
    """Draw one reading per direction (sensor frame) from the decay model."""
    directions = np.asarray(directions, dtype=np.float32).reshape(-1, 3)
    scan = Scan(pose, directions, np.zeros(len(directions), np.uint8),
                np.zeros(len(directions), np.float32), r_min, r_max)
    origins, dirs = scan.world_rays()
    u = 1.0 - rng.random(len(directions))
    r = sample_ranges(world, origins, dirs, r_max, u)
    scan.kinds, scan.ranges = classify(r, r_min, r_max)
    return scan


def sample_ray(world: DecayGrid, pose: Pose, direction, r_min, r_max,
               rng: np.random.Generator) -> Measurement:
    """Draw a single reading along ``direction`` (sensor frame)."""
    scan = sample_scan(world, pose, np.asarray(direction).reshape(1, 3), r_min, r_max, rng)
    return scan.measurement(0)


def corrupt_scan(scan: Scan, failure_rate: float, rng: np.random.Generator) -> Scan:
    """Replace each reading by SUB with probability ``failure_rate``."""
    if not 0.0 <= failure_rate <= 1.0:
        raise ValueError("failure_rate must lie in [0, 1]")
    fail = rng.random(len(scan)) < failure_rate
    kinds = scan.kinds.copy()
    ranges = scan.ranges.copy()
    kinds[fail] = SUB
    ranges[fail] = 0.0
    out = Scan(scan.pose, scan.directions, kinds, ranges, scan.r_min, scan.r_max)
    out.stats = dict(scan.stats, corrupted=int(fail.sum()))
    return out


def simulate_scans(world: DecayGrid, poses, spec: ScanSpec, seed: int,
                   first_index: int = 0) -> list[Scan]:
    """Scans at each pose, with the configured sensor-failure corruption."""
    dirs = spec.directions()
    scans = []
    for i, pose in enumerate(poses):
        idx = first_index + i
        s = sample_scan(world, pose, dirs, spec.r_min, spec.r_max, stream(seed, STREAM_RAYS, idx))
        if spec.failure_rate > 0:
            s = corrupt_scan(s, spec.failure_rate, stream(seed, STREAM_FAILURES, idx))
        scans.append(s)
    return scans


# ---------------------------------------------------------------------------
# trajectories

def trajectory(waypoints, steps: int, height: float | None = None) -> list[Pose]:
    """``steps`` poses evenly spaced along a polyline, heading along the path."""
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[0] < 2:
        raise ValueError("need at least two waypoints")
    if wp.shape[1] == 2:
        wp = np.column_stack([wp, np.full(len(wp), 0.0 if height is None else height)])
    elif height is not None:
        wp = wp.copy()
        wp[:, 2] = height
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.linspace(0.0, cum[-1], int(steps))
    poses = []
    for si in s:
        k = min(np.searchsorted(cum, si, side="right") - 1, len(seg) - 1)
        f = (si - cum[k]) / seg_len[k] if seg_len[k] > 0 else 0.0
        p = wp[k] + f * seg[k]
        yaw = math.atan2(seg[k, 1], seg[k, 0])
        poses.append(Pose(p, quat_from_yaw(yaw)))
    return poses


# ---------------------------------------------------------------------------
# preset worlds

def _ground(geom, rate=30.0, level=0.6, amplitude=0.25, wavelength=11.0):
    """Gently rolling ground filling the grid bottom up to about ``level``."""
    lo = np.asarray(geom.origin)
    hi = geom.upper
    c = 0.5 * (lo + hi)
    return Primitive("terrain", (c[0], c[1], lo[2] + level), rate,
                     size=(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, level + 1.0),
                     height=amplitude, radius=wavelength)


def _tree(x, y, z0, trunk_r, trunk_h, crown_r, trunk_rate=20.0, crown_rate=0.6):
    return [Primitive("cylinder", (x, y, z0), trunk_rate, radius=trunk_r, height=trunk_h),
            Primitive("sphere", (x, y, z0 + trunk_h + 0.6 * crown_r), crown_rate, radius=crown_r)]


def _path_distance(x, y, waypoints):
    p = np.array([x, y])
    wp = np.asarray(waypoints, dtype=np.float64)[:, :2]
    best = np.inf
    for a, b in zip(wp[:-1], wp[1:]):
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(p - (a + t * ab))))
    return best


def _free_spots(rng, n, lo, hi, waypoints, clearance=3.0):
    """``n`` random (x, y) positions at least ``clearance`` from the preset path."""
    spots = []
    while len(spots) < n:
        x, y = rng.uniform(lo, hi)
        if _path_distance(x, y, waypoints) >= clearance:
            spots.append((x, y))
    return spots


def preset_world(name: str, seed: int = 0, edge: float = 0.5) -> WorldSpec:
    """Desk-scale stand-ins for structured (campus), wooded (forest) and open (park) scenes.

    Random trees and bushes keep clear of the preset path so the sensor never
    starts inside an object.
    """
    rng = np.random.default_rng(seed)
    path = preset_waypoints(name) if name in _PATHS else None
    if name == "campus":
        geom = GridGeometry((0.0, 0.0, 0.0), edge, (int(40 / edge), int(40 / edge), int(8 / edge)))
        prims = [_ground(geom)]
        prims += [Primitive("box", (28.0, 20.0, 3.0), 15.0, size=(8.0, 20.0, 6.0)),
                  Primitive("box", (8.0, 34.0, 2.5), 15.0, size=(12.0, 5.0, 5.0), yaw=0.2),
                  Primitive("box", (10.0, 8.0, 1.0), 4.0, size=(4.0, 1.5, 2.0), yaw=0.6),
                  Primitive("box", (20.0, 30.0, 0.6), 2.0, size=(6.0, 0.8, 1.2)),
                  Primitive("cylinder", (31.0, 6.0, 0.2), 10.0, radius=1.0, height=4.0)]
        for x, y in _free_spots(rng, 10, [3, 3], [22, 30], path):
            prims += _tree(x, y, 0.2, rng.uniform(0.2, 0.35), rng.uniform(2.0, 3.5),
                           rng.uniform(1.2, 2.2))
        return WorldSpec(geom, prims, background_rate=0.0, seed=seed)
    if name == "forest":
        geom = GridGeometry((0.0, 0.0, 0.0), edge, (int(36 / edge), int(36 / edge), int(10 / edge)))
        prims = [_ground(geom)]
        for x, y in _free_spots(rng, 35, [1, 1], [35, 35], path):
            prims += _tree(x, y, 0.2, rng.uniform(0.15, 0.4), rng.uniform(2.0, 4.0),
                           rng.uniform(1.5, 3.0), crown_rate=rng.uniform(0.3, 1.2))
        for x, y in _free_spots(rng, 25, [1, 1], [35, 35], path):
            prims.append(Primitive("sphere", (x, y, 0.8), rng.uniform(0.4, 1.5),
                                   radius=rng.uniform(0.5, 1.2)))
        return WorldSpec(geom, prims, background_rate=0.0, seed=seed)
    if name == "park":
        geom = GridGeometry((0.0, 0.0, 0.0), edge, (int(48 / edge), int(48 / edge), int(8 / edge)))
        prims = [_ground(geom)]
        prims.append(Primitive("box", (24.0, 44.0, 1.5), 12.0, size=(10.0, 2.0, 3.0)))
        prims.append(Primitive("box", (40.0, 14.0, 1.0), 6.0, size=(2.0, 6.0, 2.0), yaw=0.4))
        for x, y in _free_spots(rng, 14, [2, 2], [46, 40], path):
            prims += _tree(x, y, 0.2, rng.uniform(0.2, 0.45), rng.uniform(2.5, 4.0),
                           rng.uniform(1.5, 2.8), crown_rate=rng.uniform(0.3, 0.9))
        return WorldSpec(geom, prims, background_rate=0.0, seed=seed)
    raise ValueError(f"unknown preset world {name!r}")


_PATHS = {
    "campus": [(4.0, 20.0), (18.0, 18.0), (22.0, 26.0), (16.0, 30.0)],
    "forest": [(4.0, 6.0), (14.0, 16.0), (24.0, 14.0), (30.0, 24.0)],
    "park": [(6.0, 8.0), (20.0, 20.0), (34.0, 24.0), (40.0, 34.0)],
}


def preset_waypoints(name: str):
    if name not in _PATHS:
        raise ValueError(f"unknown preset world {name!r}")
    return list(_PATHS[name])
