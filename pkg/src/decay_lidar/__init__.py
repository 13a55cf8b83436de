"""Decay-rate lidar sensor model with reflection and endpoint baselines."""
from .decay_map import DecayGrid, MapAccumulator, build_decay_map
from .grid import GridGeometry, trace_ray
from .likelihood import ray_likelihood, scan_log_likelihood
from .scan import RANGE, SUB, SUP, Measurement, Scan
from .transforms import Pose

__version__ = "0.1.0"

__all__ = ["DecayGrid", "GridGeometry", "MapAccumulator", "Measurement", "Pose", "RANGE",
           "SUB", "SUP", "Scan", "build_decay_map", "ray_likelihood", "scan_log_likelihood",
           "trace_ray"]
