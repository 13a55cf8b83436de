import numpy as np
import pytest

from decay_lidar.decay_map import DecayGrid
from decay_lidar.grid import GridGeometry
from decay_lidar.scan import Scan
from decay_lidar.transforms import Pose


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_decay_grid(rng, dims=(6, 5, 3), edge=1.0, lo=0.0, hi=2.0, prior=0.05, empty=0.3):
    """Random piecewise-constant world; a fraction ``empty`` of voxels is transparent."""
    geom = GridGeometry(tuple(rng.uniform(-1, 1, 3)), edge, dims)
    rate = rng.uniform(lo, hi, geom.size)
    rate[rng.random(geom.size) < empty] = 0.0
    return DecayGrid(geom, rate, prior, prior)


def identity_scan(dirs, kinds, ranges, r_min=0.0, r_max=10.0, origin=(0.0, 0.0, 0.0)):
    return Scan(Pose(np.asarray(origin, float), (1.0, 0.0, 0.0, 0.0)), dirs, kinds, ranges,
                r_min, r_max)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, passed, detail)."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_CRITERIA, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
