"""Monte Carlo localization over 6-DoF poses with a pluggable sensor map.

Any map exposing ``ray_log_likelihoods`` (DecayGrid, ReflectionGrid,
LikelihoodField) can weight the particles; the filter itself is identical
for all three models.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .likelihood import LOG_FLOOR, floor_logs
from .scan import Scan
from .simulator import STREAM_FILTER, STREAM_ODOMETRY, stream
from .transforms import (Pose, normalize_quat, quat_from_rotvec, quat_multiply, quat_to_matrix,
                         weighted_quat_mean)

log = logging.getLogger(__name__)

MODELS = ("decay", "reflection", "endpoint")

# Per-ray floor inside the filter: about log(1 / 30 m), the density of a
# reading spread uniformly over the sensor range. A ray the map cannot explain
# then costs no more than an outlier would, for every model alike.
FILTER_LOG_FLOOR = -3.4


@dataclass
class FilterConfig:
    particle_count: int = 300
    init_sigma: tuple = (1.0, 0.2, 0.1)      # horizontal m, vertical m, rotation rad
    motion_noise: tuple = (0.05, 0.01)       # translation m, rotation rad per step
    odometry_noise: tuple = (0.02, 0.005)    # corruption of simulated odometry
    resample_threshold: float = 0.5
    model: str = "decay"
    ray_subsample: int = 10
    log_floor: float = FILTER_LOG_FLOOR
    likelihood_scale: float = 1.0            # exponent applied to scan likelihoods

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if self.ray_subsample < 1:
            raise ValueError("ray_subsample must be >= 1")
        if not (self.likelihood_scale > 0):
            raise ValueError("likelihood_scale must be positive")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        self.init_sigma = tuple(float(v) for v in self.init_sigma)
        self.motion_noise = tuple(float(v) for v in self.motion_noise)
        self.odometry_noise = tuple(float(v) for v in self.odometry_noise)
        if len(self.init_sigma) != 3 or len(self.motion_noise) != 2 or len(self.odometry_noise) != 2:
            raise ValueError("init_sigma needs 3 values, motion/odometry noise 2 values")
        if min(self.init_sigma + self.motion_noise + self.odometry_noise) < 0:
            raise ValueError("all noise levels must be >= 0")


@dataclass
class ParticleSet:
    positions: np.ndarray     # (N, 3)
    quaternions: np.ndarray   # (N, 4) w, x, y, z
    log_weights: np.ndarray   # (N,)

    def __len__(self):
        return len(self.log_weights)

    def copy(self) -> ParticleSet:
        return ParticleSet(self.positions.copy(), self.quaternions.copy(), self.log_weights.copy())

    def weights(self) -> np.ndarray:
        """Normalised weights (sum to one)."""
        w = np.exp(self.log_weights - np.max(self.log_weights))
        return w / w.sum()

    def effective_sample_size(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w * w))

    def pose(self, i: int) -> Pose:
        return Pose(self.positions[i], self.quaternions[i])


def _rotvec_noise(rng, n, sigma):
    return rng.normal(0.0, sigma, size=(n, 3))


def initialize(config: FilterConfig, initial_guess: Pose, rng: np.random.Generator) -> ParticleSet:
    """Gaussian cloud around ``initial_guess`` with uniform weights."""
    n = config.particle_count
    sxy, sz, srot = config.init_sigma
    noise = rng.normal(size=(n, 3)) * np.array([sxy, sxy, sz])
    positions = initial_guess.position + noise
    q0 = np.broadcast_to(initial_guess.quaternion, (n, 4))
    if srot > 0:
        quats = normalize_quat(quat_multiply(q0, quat_from_rotvec(_rotvec_noise(rng, n, srot))))
    else:
        quats = np.array(q0)
    return ParticleSet(positions, quats, np.zeros(n))


def _rotate_batch(quats, v):
    """Rotate vectors v (M, 3) by each of N quaternions -> (N, M, 3)."""
    R = quat_to_matrix(quats).reshape(-1, 3, 3)
    v = np.asarray(v, dtype=np.float64)
    return (v[None, :, 0:1] * R[:, None, :, 0] + v[None, :, 1:2] * R[:, None, :, 1]
            + v[None, :, 2:3] * R[:, None, :, 2])


def predict(particles: ParticleSet, delta: Pose, motion_noise, rng: np.random.Generator) -> ParticleSet:
    """Compose every particle with the odometry delta, then add Gaussian noise."""
    n = len(particles)
    sig_t, sig_r = motion_noise
    moved = _rotate_batch(particles.quaternions, delta.position[None, :])[:, 0, :]
    positions = particles.positions + moved
    quats = normalize_quat(quat_multiply(particles.quaternions, delta.quaternion))
    if sig_t > 0:
        positions = positions + rng.normal(0.0, sig_t, size=(n, 3))
    if sig_r > 0:
        quats = normalize_quat(quat_multiply(quats, quat_from_rotvec(_rotvec_noise(rng, n, sig_r))))
    return ParticleSet(positions, quats, particles.log_weights.copy())


def particle_log_likelihoods(particles: ParticleSet, scan: Scan, sensor_map, stride: int = 1,
                             log_floor=LOG_FLOOR, threads: int = 1) -> np.ndarray:
    """Scan log-likelihood evaluated at every particle pose."""
    sub = scan.subsample(stride) if stride > 1 else scan
    m = len(sub)
    n = len(particles)
    if m == 0:
        return np.zeros(n)
    d = sub.directions.astype(np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    dirs = _rotate_batch(particles.quaternions, d)
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    origins = np.repeat(particles.positions[:, None, :], m, axis=1)
    kinds = np.tile(sub.kinds, n)
    ranges = np.tile(sub.ranges.astype(np.float64), n)
    logs = sensor_map.ray_log_likelihoods(origins.reshape(-1, 3), dirs.reshape(-1, 3), kinds,
                                          ranges, sub.r_min, sub.r_max, threads=threads)
    logs, _ = floor_logs(logs, log_floor)
    return logs.reshape(n, m).sum(axis=1)


def correct(particles: ParticleSet, scan: Scan, sensor_map, stride: int = 1,
            log_floor=LOG_FLOOR, threads: int = 1, scale: float = 1.0) -> ParticleSet:
    """Add scan log-likelihoods to the log weights and shift so the max is 0.

    ``scale`` < 1 tempers the likelihood (weights ``p**scale``).
    """
    ll = particle_log_likelihoods(particles, scan, sensor_map, stride, log_floor, threads)
    lw = particles.log_weights + scale * ll
    top = np.max(lw)
    if not np.isfinite(top):
        raise FloatingPointError("no particle has a finite weight after the update")
    lw = lw - top
    return ParticleSet(particles.positions, particles.quaternions, lw)


def systematic_indices(weights, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def resample(particles: ParticleSet, rng: np.random.Generator, threshold: float = 0.5) -> ParticleSet:
    """Low-variance resampling when ESS / N drops below ``threshold``."""
    n = len(particles)
    if particles.effective_sample_size() / n >= threshold:
        return particles
    idx = systematic_indices(particles.weights(), rng)
    return ParticleSet(particles.positions[idx].copy(), particles.quaternions[idx].copy(),
                       np.zeros(n))


def estimate(particles: ParticleSet) -> Pose:
    """Weighted mean position and weighted quaternion-mean rotation."""
    if len(particles) == 0:
        raise ValueError("cannot estimate from an empty particle set")
    w = particles.weights()
    pos = w @ particles.positions
    return Pose(pos, weighted_quat_mean(particles.quaternions, w))


# ---------------------------------------------------------------------------
# full filter

@dataclass
class TrajectoryRow:
    step: int
    estimate: Pose
    truth: Pose

    @property
    def position_error(self) -> float:
        return float(np.linalg.norm(self.estimate.position - self.truth.position))


@dataclass
class FilterResult:
    rows: list = field(default_factory=list)
    model: str = "decay"

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.position_error for r in self.rows])

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean()) if self.rows else float("nan")


def noisy_odometry(true_poses, noise, seed: int) -> list[Pose]:
    """Relative motions between consecutive poses, corrupted by Gaussian noise."""
    sig_t, sig_r = noise
    deltas = []
    for i in range(1, len(true_poses)):
        d = true_poses[i].relative_to(true_poses[i - 1])
        rng = stream(seed, STREAM_ODOMETRY, i)
        p = d.position + rng.normal(0.0, sig_t, 3) if sig_t > 0 else d.position
        q = d.quaternion
        if sig_r > 0:
            q = normalize_quat(quat_multiply(q, quat_from_rotvec(rng.normal(0.0, sig_r, 3))))
        deltas.append(Pose(p, q))
    return deltas


def perturbed_start(truth: Pose, config: FilterConfig, seed: int) -> Pose:
    """Initial guess offset from the true start by a draw from the init distribution."""
    rng = stream(seed, STREAM_FILTER, 10**6)
    sxy, sz, srot = config.init_sigma
    off = rng.normal(size=3) * np.array([sxy, sxy, sz])
    q = truth.quaternion
    if srot > 0:
        q = normalize_quat(quat_multiply(q, quat_from_rotvec(rng.normal(0.0, srot, 3))))
    return Pose(truth.position + off, q)


def run_filter(sensor_map, scans, config: FilterConfig, seed: int, odometry=None,
               initial_guess: Pose | None = None, threads: int = 1) -> FilterResult:
    """Localize along a sequence of scans whose headers hold the true poses.

    The filter only sees the true poses through the (noisy) odometry and the
    perturbed initial guess; they are otherwise used for the error column.
    """
    scans = list(scans)
    truths = [s.pose for s in scans]
    if odometry is None:
        odometry = noisy_odometry(truths, config.odometry_noise, seed)
    if initial_guess is None:
        initial_guess = perturbed_start(truths[0], config, seed)
    rng = stream(seed, STREAM_FILTER, 0)
    particles = initialize(config, initial_guess, rng)
    result = FilterResult(model=config.model)
    for t, scan in enumerate(scans):
        if t > 0:
            particles = predict(particles, odometry[t - 1], config.motion_noise, rng)
        particles = correct(particles, scan, sensor_map, config.ray_subsample,
                            config.log_floor, threads, config.likelihood_scale)
        est = estimate(particles)
        result.rows.append(TrajectoryRow(t, est, truths[t]))
        particles = resample(particles, rng, config.resample_threshold)
        log.debug("step %d error %.3f", t, result.rows[-1].position_error)
    return result


TRAJECTORY_COLUMNS = (["step"] + [f"est_{c}" for c in ("x", "y", "z", "qw", "qx", "qy", "qz")]
                      + [f"true_{c}" for c in ("x", "y", "z", "qw", "qx", "qy", "qz")]
                      + ["position_error_m"])


def write_trajectory_csv(path, result: FilterResult):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for row in result.rows:
            w.writerow([row.step] + [repr(float(v)) for v in row.estimate.as_array()]
                       + [repr(float(v)) for v in row.truth.as_array()]
                       + [repr(row.position_error)])


def read_trajectory_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]
