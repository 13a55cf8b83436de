"""Model-quality metrics and the three-model comparison.

Two metrics score how well a sensor model explains data recorded at known
poses. The forward metric is the negative log-likelihood of all rays at the
true poses. The inverse metric compares the pose likelihood over poses
sampled around the truth with a Gaussian ground-truth surrogate.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import build_likelihood_field, build_reflection_map
from .decay_map import build_decay_map
from .grid import GridGeometry
from .likelihood import LOG_FLOOR, scan_log_likelihood
from .mcl import MODELS, FilterConfig, ParticleSet, particle_log_likelihoods, run_filter
from .simulator import (STREAM_EVAL, ScanSpec, preset_waypoints, preset_world,
                        rasterize_world, simulate_scans, stream, trajectory)
from .transforms import Pose

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    sample_count: int = 50
    sample_radius: float = 2.5
    gt_sigma: tuple = (0.3, 0.3)          # per horizontal axis, meters
    ray_subsample: int = 1
    log_floor: float = LOG_FLOOR
    kl_raw: bool = False

    def __post_init__(self):
        if self.sample_count < 2:
            raise ValueError("sample_count must be >= 2")
        if not self.sample_radius > 0:
            raise ValueError("sample_radius must be positive")
        self.gt_sigma = tuple(float(s) for s in np.broadcast_to(self.gt_sigma, (2,)))
        if min(self.gt_sigma) <= 0:
            raise ValueError("gt_sigma must be positive")
        if self.ray_subsample < 1:
            raise ValueError("ray_subsample must be >= 1")


@dataclass(frozen=True)
class InverseKL:
    value: float
    valid: bool
    samples: int


def forward_kl(sensor_map, scans, log_floor=LOG_FLOOR, threads: int = 1) -> float:
    """Negative summed log-likelihood of all rays at their recorded poses.

    The additive constant of the divergence is dropped, so only differences
    between models on the same data are meaningful.
    """
    return -scan_log_likelihood(sensor_map, scans, log_floor=log_floor, threads=threads).log_value


def disc_samples(center: Pose, count: int, radius: float, rng) -> ParticleSet:
    """Poses uniform in a horizontal disc around ``center``, orientation unchanged."""
    rho = radius * np.sqrt(rng.random(count))
    phi = rng.uniform(0.0, 2 * np.pi, count)
    pos = np.repeat(center.position[None, :], count, axis=0)
    pos[:, 0] += rho * np.cos(phi)
    pos[:, 1] += rho * np.sin(phi)
    quats = np.repeat(center.quaternion[None, :], count, axis=0)
    return ParticleSet(pos, quats, np.zeros(count))


def _log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    return x - (m + np.log(np.sum(np.exp(x - m))))


def kl_on_samples(log_lik, log_gt, raw=False) -> float:
    """KL(p || g) with p the normalised likelihood over the samples.

    ``log_gt`` are log surrogate densities; unless ``raw`` they are
    renormalised over the same samples.
    """
    lp = _log_softmax(log_lik)
    lg = np.asarray(log_gt, dtype=np.float64) if raw else _log_softmax(log_gt)
    p = np.exp(lp)
    return float(np.sum(p * (lp - lg)))


def inverse_kl(sensor_map, scan, true_pose: Pose, config: EvalConfig, rng,
               threads: int = 1) -> InverseKL:
    """Divergence of the sampled pose likelihood from a Gaussian around the truth."""
    samples = disc_samples(true_pose, config.sample_count, config.sample_radius, rng)
    sub = scan.subsample(config.ray_subsample) if config.ray_subsample > 1 else scan
    ll = particle_log_likelihoods(samples, sub, sensor_map, 1, config.log_floor, threads)
    sx, sy = config.gt_sigma
    delta = samples.positions[:, :2] - true_pose.position[:2]
    log_gt = (-0.5 * ((delta[:, 0] / sx) ** 2 + (delta[:, 1] / sy) ** 2)
              - math.log(2 * math.pi * sx * sy))
    # every ray of every sample at the floor: the likelihood carries no information
    valid = config.log_floor is None or bool(np.any(ll > config.log_floor * len(sub)))
    return InverseKL(kl_on_samples(ll, log_gt, config.kl_raw), valid, config.sample_count)


def inverse_kl_mean(sensor_map, scans, config: EvalConfig, seed: int, threads: int = 1):
    """Mean inverse metric over scans; returns (mean, number of invalid scans)."""
    vals, invalid = [], 0
    for i, scan in enumerate(scans):
        res = inverse_kl(sensor_map, scan, scan.pose, config, stream(seed, STREAM_EVAL, i), threads)
        if res.valid:
            vals.append(res.value)
        else:
            invalid += 1
    return (float(np.mean(vals)) if vals else float("nan")), invalid


# ---------------------------------------------------------------------------
# scenarios and the comparison report

@dataclass
class ScenarioConfig:
    """A preset world, a mapping drive and a localization drive along the same path.

    The world is rasterised finer than the maps and the map lattice is offset
    from it, so object boundaries do not coincide with map voxel faces.
    """
    world: str = "campus"
    world_edge: float = 0.125
    map_edge: float = 0.5
    map_offset: tuple = (0.2, 0.3, 0.1)
    sensor_height: float = 1.8
    mapping_steps: int = 120
    steps: int = 60
    failure_rate: float = 0.1
    scan: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mapping_steps < 1 or self.steps < 2:
            raise ValueError("need >= 1 mapping scan and >= 2 localization scans")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        self.map_offset = tuple(float(v) for v in self.map_offset)


@dataclass
class Scenario:
    config: ScenarioConfig
    world: object
    map_geom: GridGeometry
    mapping_scans: list
    scans: list


def map_geometry_for(world_geom: GridGeometry, edge: float, offset) -> GridGeometry:
    """Map grid covering ``world_geom`` whose lattice is shifted by ``-offset``."""
    origin = np.asarray(world_geom.origin) - np.asarray(offset, dtype=np.float64)
    dims = np.ceil((world_geom.upper - origin) / edge).astype(int)
    return GridGeometry(tuple(origin), edge, tuple(dims))


def make_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    world = rasterize_world(preset_world(config.world, seed, edge=config.world_edge))
    wp = preset_waypoints(config.world)
    base = ScanSpec(**config.scan)
    mapping = simulate_scans(world, trajectory(wp, config.mapping_steps, config.sensor_height),
                             ScanSpec(**{**asdict(base), "failure_rate": 0.0}), seed)
    local = simulate_scans(world, trajectory(wp, config.steps, config.sensor_height),
                           ScanSpec(**{**asdict(base), "failure_rate": config.failure_rate}),
                           seed, first_index=config.mapping_steps)
    geom = map_geometry_for(world.geom, config.map_edge, config.map_offset)
    return Scenario(config, world, geom, mapping, local)


@dataclass
class ModelParams:
    """Map-building parameters of the three models."""
    prior_rate: float = 0.05
    unobserved_rate: float | None = None
    rate_cap: float = 1e4
    prior_q: float = 0.05
    unobserved_q: float | None = None
    sigma: float = 0.2
    p_oor: float = 0.1


def build_maps(scans, geom: GridGeometry, params: ModelParams | None = None, threads: int = 1,
               models=MODELS) -> dict:
    """All requested sensor maps from the same mapping scans."""
    params = params or ModelParams()
    out = {}
    for m in models:
        if m == "decay":
            out[m] = build_decay_map(scans, geom, prior_rate=params.prior_rate,
                                     unobserved_rate=params.unobserved_rate,
                                     rate_cap=params.rate_cap, threads=threads)
        elif m == "reflection":
            out[m] = build_reflection_map(scans, geom, prior_q=params.prior_q,
                                          unobserved_q=params.unobserved_q, threads=threads)
        elif m == "endpoint":
            out[m] = build_likelihood_field(scans, geom, sigma=params.sigma, p_oor=params.p_oor)
        else:
            raise ValueError(f"unknown model {m!r}")
    return out


def compare_models(maps: dict, scans, seed: int, eval_config: EvalConfig | None = None,
                   filter_config: FilterConfig | None = None, params: ModelParams | None = None,
                   run_mcl: bool = True, threads: int = 1) -> dict:
    """Forward and inverse metrics plus MCL error for every model on identical data."""
    eval_config = eval_config or EvalConfig()
    filter_config = filter_config or FilterConfig()
    params = params or ModelParams()
    report = {}
    for name, smap in maps.items():
        fkl = forward_kl(smap, scans, eval_config.log_floor, threads)
        ikl, invalid = inverse_kl_mean(smap, scans, eval_config, seed, threads)
        row = {"forward_kl": fkl, "inverse_kl_mean": ikl, "inverse_kl_invalid": invalid}
        if run_mcl:
            fc = FilterConfig(**{**asdict(filter_config), "model": name})
            row["mcl_mean_error_m"] = run_filter(smap, scans, fc, seed, threads=threads).mean_error
        else:
            row["mcl_mean_error_m"] = None
        row["config"] = {
            "eval": asdict(eval_config),
            "filter": {**asdict(filter_config), "model": name},
            "model": asdict(params),
            "inverse_kl_sampling": "horizontal disc, orientation fixed to the true pose",
            "seed": seed,
        }
        report[name] = row
        log.info("%s: forward %.1f inverse %.3f", name, fkl, ikl)
    return report


METRICS = ("forward_kl", "inverse_kl_mean", "mcl_mean_error_m")


def report_rows(report: dict, scenario: str = ""):
    """Flatten a report into (scenario, model, metric, value) rows."""
    rows = []
    for model, entry in report.items():
        for metric in METRICS:
            rows.append((scenario, model, metric, entry.get(metric)))
    return rows


def write_report(report: dict, json_path, csv_path=None):
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    if csv_path is not None:
        write_report_csv(report, csv_path)


def write_report_csv(report: dict, path):
    """CSV flattening; suite reports ({scenario: report}) get a scenario column."""
    nested = all(isinstance(v, dict) and set(v) & set(MODELS) for v in report.values())
    rows = []
    if nested and not (set(report) & set(MODELS)):
        for scen, rep in report.items():
            rows += report_rows(rep, scen)
    else:
        rows = report_rows(report)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scenario", "model", "metric", "value"])
        for scen, model, metric, value in rows:
            w.writerow([scen, model, metric, "" if value is None else repr(float(value))])


STANDARD_SUITE = ("campus", "forest", "park")


def standard_suite(seed: int = 0, eval_config: EvalConfig | None = None,
                   filter_config: FilterConfig | None = None, run_mcl: bool = False,
                   scenario_overrides: dict | None = None, threads: int = 1) -> dict:
    """Comparison report for each preset world: {world: {model: metrics}}."""
    out = {}
    for name in STANDARD_SUITE:
        sc = make_scenario(ScenarioConfig(world=name, **(scenario_overrides or {})), seed)
        maps = build_maps(sc.mapping_scans, sc.map_geom, threads=threads)
        out[name] = compare_models(maps, sc.scans, seed, eval_config, filter_config,
                                   run_mcl=run_mcl, threads=threads)
    return out
