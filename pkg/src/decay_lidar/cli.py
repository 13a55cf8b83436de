"""Command-line front end: simulate, build-map, localize, eval, plot-data.

Every command reads an optional strict JSON config, writes data only to the
files it is asked for (plus a ``<output>.config.json`` echo next to each
output) and logs to stderr.

Exit codes: 0 success, 2 config/validation error, 3 I/O error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import io as dio
from .evaluation import (EvalConfig, ModelParams, build_maps, compare_models, map_geometry_for,
                         write_report)
from .grid import GridGeometry
from .likelihood import density_profile
from .mcl import MODELS, FilterConfig, run_filter, write_trajectory_csv
from .scan import Measurement
from .simulator import (Primitive, ScanSpec, WorldSpec, preset_waypoints, preset_world,
                        rasterize_world, simulate_scans, trajectory)
from .transforms import Pose

log = logging.getLogger("decay_lidar")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "DECAY_LIDAR_THREADS"


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class WorldSection:
    preset: str | None = "campus"
    edge: float = 0.125
    geom: dict | None = None
    primitives: list | None = None
    background_rate: float = 0.0
    prior_rate: float | None = None


@dataclass
class TrajectorySection:
    waypoints: list | None = None
    steps: int = 60
    mapping_steps: int = 0
    height: float = 1.8


@dataclass
class MapSection:
    edge: float = 0.5
    offset: tuple = (0.2, 0.3, 0.1)
    geom: dict | None = None
    prior_rate: float = 0.05
    unobserved_rate: float | None = None
    rate_cap: float = 1e4
    prior_q: float = 0.05
    unobserved_q: float | None = None
    sigma: float = 0.2
    p_oor: float = 0.1

    def params(self) -> ModelParams:
        names = {f.name for f in fields(ModelParams)}
        return ModelParams(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldSection = field(default_factory=WorldSection)
    scan: ScanSpec = field(default_factory=ScanSpec)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    map: MapSection = field(default_factory=MapSection)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


_SECTIONS = {"world": WorldSection, "scan": ScanSpec, "trajectory": TrajectorySection,
             "map": MapSection, "filter": FilterConfig, "eval": EvalConfig}
_PATH_KEYS = {"scans", "map", "maps", "out", "out_dir", "trajectory", "report"}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON config; unknown keys anywhere are rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _build(cls, data[name], name)
    if "seed" in data:
        seed = data["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        kw["seed"] = seed
    if "paths" in data:
        paths = data["paths"]
        if not isinstance(paths, dict):
            raise ConfigError("paths: expected an object")
        bad = sorted(set(paths) - _PATH_KEYS)
        if bad:
            raise ConfigError(f"paths: unknown key(s) {', '.join(bad)}")
        kw["paths"] = paths
    cfg = RunConfig(**kw)
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg: RunConfig):
    w = cfg.world
    if w.geom is None and w.preset is None:
        raise ConfigError("world: give either a preset or an explicit geom")
    if w.geom is not None:
        _geometry(w.geom, "world.geom")
        for i, p in enumerate(w.primitives or []):
            _build(Primitive, p, f"world.primitives[{i}]")
    elif w.primitives:
        raise ConfigError("world: primitives need an explicit geom")
    if not w.edge > 0:
        raise ConfigError("world.edge must be positive")
    t = cfg.trajectory
    if t.steps < 1 or t.mapping_steps < 0:
        raise ConfigError("trajectory: steps must be >= 1 and mapping_steps >= 0")
    if t.waypoints is None and w.preset is None:
        raise ConfigError("trajectory: waypoints are required without a preset world")
    m = cfg.map
    if not m.edge > 0:
        raise ConfigError("map.edge must be positive")
    if m.geom is not None:
        _geometry(m.geom, "map.geom")
    if len(tuple(m.offset)) != 3:
        raise ConfigError("map.offset needs three values")


def _geometry(d, where) -> GridGeometry:
    g = _build(_GeomSection, d, where)
    try:
        return GridGeometry(tuple(g.origin), g.edge, tuple(g.dims))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class _GeomSection:
    origin: list
    edge: float
    dims: list


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)


def world_spec(cfg: RunConfig) -> WorldSpec:
    w = cfg.world
    if w.geom is not None:
        prims = [Primitive(**p) for p in (w.primitives or [])]
        return WorldSpec(_geometry(w.geom, "world.geom"), prims, w.background_rate,
                         w.prior_rate, cfg.seed)
    try:
        return preset_world(w.preset, cfg.seed, edge=w.edge)
    except ValueError as exc:
        raise ConfigError(f"world: {exc}") from None


def map_geometry(cfg: RunConfig) -> GridGeometry:
    if cfg.map.geom is not None:
        return _geometry(cfg.map.geom, "map.geom")
    return map_geometry_for(world_spec(cfg).geom, cfg.map.edge, cfg.map.offset)


def waypoints(cfg: RunConfig):
    if cfg.trajectory.waypoints is not None:
        return cfg.trajectory.waypoints
    return preset_waypoints(cfg.world.preset)


def resolve_threads(arg) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get(THREADS_ENV)
        if env is None or env.strip() == "":
            return 1
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _path(args, cfg: RunConfig, name):
    v = getattr(args, name, None)
    if v is None:
        v = cfg.paths.get(name)
    if v is None:
        raise ConfigError(f"missing path: --{name.replace('_', '-')}")
    return v


def echo_config(output_path, cfg: RunConfig, command: str, extra: dict | None = None):
    """Write the effective configuration next to an output file."""
    doc = {"command": command, "config": cfg.to_json()}
    if extra:
        doc["arguments"] = extra
    with open(f"{output_path}.config.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg: RunConfig, threads: int):
    out_dir = _path(args, cfg, "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    spec = world_spec(cfg)
    world = rasterize_world(spec)
    t = cfg.trajectory
    wp = waypoints(cfg)
    try:
        poses = trajectory(wp, t.steps, t.height)
    except ValueError as exc:
        raise ConfigError(f"trajectory: {exc}") from None
    scans = simulate_scans(world, poses, cfg.scan, cfg.seed, first_index=t.mapping_steps)
    outputs = {"scans": os.path.join(out_dir, "scans.dsc"),
               "truth_map": os.path.join(out_dir, "world.drm"),
               "trajectory": os.path.join(out_dir, "trajectory.csv")}
    dio.write_scans(outputs["scans"], scans)
    dio.write_decay_map(outputs["truth_map"], world)
    with open(outputs["trajectory"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "x", "y", "z", "qw", "qx", "qy", "qz"])
        for i, p in enumerate(poses):
            w.writerow([i] + [repr(float(v)) for v in p.as_array()])
    if t.mapping_steps > 0:
        mpos = trajectory(wp, t.mapping_steps, t.height)
        mspec = ScanSpec(**{**asdict(cfg.scan), "failure_rate": 0.0})
        outputs["mapping_scans"] = os.path.join(out_dir, "mapping.dsc")
        dio.write_scans(outputs["mapping_scans"], simulate_scans(world, mpos, mspec, cfg.seed))
    for p in outputs.values():
        echo_config(p, cfg, "simulate")
    counts = np.sum([[np.count_nonzero(s.kinds == k) for k in range(3)] for s in scans], axis=0)
    log.info("simulated %d scans: sub=%d range=%d sup=%d", len(scans), *counts)


def _read_scans(path):
    return dio.read_scans(path)


def cmd_build_map(args, cfg: RunConfig, threads: int):
    scans = _read_scans(_path(args, cfg, "scans"))
    out = _path(args, cfg, "out")
    model = args.model or cfg.filter.model
    geom = map_geometry(cfg)
    if args.checkpoint and model != "decay":
        raise ConfigError("--checkpoint is only available for the decay model")
    log.info("building %s map %s from %d scans", model, geom.dims, len(scans))
    if args.checkpoint:
        from .decay_map import MapAccumulator, integrate_scans
        acc = integrate_scans(MapAccumulator(geom), scans, threads=threads)
        dio.write_accumulator(out, acc)
    else:
        smap = build_maps(scans, geom, cfg.map.params(), threads, models=(model,))[model]
        dio.write_map(out, smap)
    echo_config(out, cfg, "build-map", {"model": model})


def _load_sensor_map(path):
    m = dio.read_map(path)
    try:
        dio.map_model_name(m)
    except TypeError:
        raise ConfigError(f"{path} holds an accumulator, not a finalized sensor map") from None
    return m


def cmd_localize(args, cfg: RunConfig, threads: int):
    smap = _load_sensor_map(_path(args, cfg, "map"))
    scans = _read_scans(_path(args, cfg, "scans"))
    out = _path(args, cfg, "out")
    model = dio.map_model_name(smap)
    if len(scans) < 1:
        raise ConfigError("localization needs at least one scan")
    fc = FilterConfig(**{**asdict(cfg.filter), "model": model})
    res = run_filter(smap, scans, fc, cfg.seed, threads=threads)
    if not np.all(np.isfinite(res.errors)):
        raise NumericFailure("filter produced non-finite poses")
    write_trajectory_csv(out, res)
    echo_config(out, cfg, "localize", {"model": model})
    log.info("%s: mean position error %.3f m over %d steps", model, res.mean_error, len(res.rows))


def cmd_eval(args, cfg: RunConfig, threads: int):
    paths = args.maps or cfg.paths.get("maps")
    if not paths:
        raise ConfigError("missing path: --maps")
    maps = {}
    for p in paths:
        m = _load_sensor_map(p)
        name = dio.map_model_name(m)
        if name in maps:
            raise ConfigError(f"two maps of the same model: {name}")
        maps[name] = m
    scans = _read_scans(_path(args, cfg, "scans"))
    out = _path(args, cfg, "out")
    ec = cfg.eval
    if args.kl_raw:
        ec = EvalConfig(**{**asdict(ec), "kl_raw": True})
    report = compare_models(maps, scans, cfg.seed, ec, cfg.filter, cfg.map.params(),
                            run_mcl=not args.no_mcl, threads=threads)
    base = out[:-5] if out.endswith(".json") else out
    write_report(report, out, base + ".csv")
    echo_config(out, cfg, "eval", {"maps": list(paths), "kl_raw": ec.kl_raw})
    echo_config(base + ".csv", cfg, "eval", {"maps": list(paths), "kl_raw": ec.kl_raw})
    for name, row in report.items():
        bad = [k for k in ("forward_kl", "inverse_kl_mean") if not math.isfinite(row[k])]
        if bad or row["inverse_kl_invalid"] == len(scans):
            raise NumericFailure(f"{name}: metric(s) not finite or all likelihoods floored")


def cmd_plot_data(args, cfg: RunConfig, threads: int):
    out = _path(args, cfg, "out")
    chosen = [x for x in (args.trajectory, args.report, args.ray_probe) if x]
    if len(chosen) != 1:
        raise ConfigError("choose exactly one of --trajectory, --report, --ray-probe")
    rows = []
    if args.trajectory:
        from .mcl import read_trajectory_csv
        data = read_trajectory_csv(args.trajectory)
        header = ["step", "position_error_m"]
        rows = [[r["step"], repr(r["position_error_m"])] for r in data]
    elif args.report:
        with open(args.report, encoding="utf-8") as f:
            report = json.load(f)
        metrics = ["forward_kl", "inverse_kl_mean", "mcl_mean_error_m"]
        header = ["model"] + metrics
        for model in sorted(report):
            rows.append([model] + ["" if report[model].get(k) is None else repr(float(report[model][k]))
                                   for k in metrics])
    else:
        maps = [_load_sensor_map(p) for p in args.ray_probe]
        origin = np.asarray(args.origin, dtype=np.float64)
        direction = np.asarray(args.direction, dtype=np.float64)
        nrm = np.linalg.norm(direction)
        if not nrm > 0:
            raise ConfigError("--direction must be nonzero")
        direction = direction / nrm
        if not (0 <= args.r_min < args.r_max) or not args.step > 0:
            raise ConfigError("need 0 <= r_min < r_max and step > 0")
        r = np.arange(args.r_min, args.r_max, args.step)
        m = Measurement.range(Pose(origin, (1.0, 0.0, 0.0, 0.0)), direction, float(r[0]) if len(r) else 0.0,
                              args.r_min, args.r_max)
        names = [dio.map_model_name(mp) for mp in maps]
        header = ["r"] + [f"p_{n}" for n in names]
        cols = [density_profile(mp, m, r) for mp in maps]
        rows = [[repr(float(rv))] + [repr(float(c[i])) for c in cols] for i, rv in enumerate(r)]
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    echo_config(out, cfg, "plot-data", {k: v for k, v in vars(args).items()
                                        if k in ("trajectory", "report", "ray_probe", "origin",
                                                 "direction", "r_min", "r_max", "step")})


def cmd_export(args, cfg: RunConfig, threads: int):
    out = _path(args, cfg, "out")
    if bool(args.scans) == bool(args.map):
        raise ConfigError("choose exactly one of --scans, --map")
    src = _read_scans(args.scans) if args.scans else dio.read_map(args.map)
    if args.map and dio.map_model_name(src) == "endpoint":
        raise ConfigError("map projection needs a decay or reflection map")
    n = dio.export_pointcloud(src, out, args.format)
    echo_config(out, cfg, "export", {"format": args.format})
    log.info("wrote %d points", n)


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decay-lidar",
                                description="Decay-rate lidar sensor model toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        sp.add_argument("--out", help="output file")
        return sp

    s = sub.add_parser("simulate", help="generate a world, trajectory and scans")
    s.add_argument("--config", help="JSON run configuration")
    s.add_argument("--threads", type=int, help="worker threads")
    s.add_argument("--out-dir", dest="out_dir", help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("build-map", help="build a sensor map from scans with known poses"))
    s.add_argument("--scans", help="scan file (DSC1)")
    s.add_argument("--model", choices=MODELS, help="sensor model (default: filter.model)")
    s.add_argument("--checkpoint", action="store_true",
                   help="write the raw decay accumulator (DRA1) instead of the map")
    s.set_defaults(func=cmd_build_map)

    s = common(sub.add_parser("localize", help="run Monte Carlo localization on a scan sequence"))
    s.add_argument("--map", help="sensor map file")
    s.add_argument("--scans", help="scan file whose headers hold the true poses")
    s.set_defaults(func=cmd_localize)

    s = common(sub.add_parser("eval", help="compare sensor models on scans with true poses"))
    s.add_argument("--maps", nargs="+", help="one map file per model")
    s.add_argument("--scans", help="evaluation scan file")
    s.add_argument("--kl-raw", dest="kl_raw", action="store_true",
                   help="use the unnormalised Gaussian surrogate in the inverse metric")
    s.add_argument("--no-mcl", dest="no_mcl", action="store_true",
                   help="skip the localization run (mcl_mean_error_m becomes null)")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("plot-data", help="CSV series for external plotting"))
    s.add_argument("--trajectory", help="trajectory CSV from localize")
    s.add_argument("--report", help="report JSON from eval")
    s.add_argument("--ray-probe", dest="ray_probe", nargs="+", metavar="MAP",
                   help="map files to probe along a line")
    s.add_argument("--origin", nargs=3, type=float, default=(0.0, 0.0, 0.0))
    s.add_argument("--direction", nargs=3, type=float, default=(1.0, 0.0, 0.0))
    s.add_argument("--r-min", dest="r_min", type=float, default=0.0)
    s.add_argument("--r-max", dest="r_max", type=float, default=30.0)
    s.add_argument("--step", type=float, default=0.01)
    s.set_defaults(func=cmd_plot_data)

    s = common(sub.add_parser("export", help="point cloud of scan endpoints or a map projection"))
    s.add_argument("--scans", help="scan file")
    s.add_argument("--map", help="decay or reflection map file")
    s.add_argument("--format", choices=("csv", "ply-ascii"), default="csv")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.DEBUG if args.verbose > 1 else
                        logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = load_config(args.config)
        threads = resolve_threads(args.threads)
        args.func(args, cfg, threads)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except dio.FormatError as exc:
        log.error("bad input file: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (NumericFailure, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
