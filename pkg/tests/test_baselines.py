import math

import numpy as np
import pytest

from decay_lidar.baselines import (LikelihoodField, ReflectionGrid, _ray_normalizer,
                                   _ray_normalizer_direct, build_likelihood_field,
                                   build_reflection_map, endpoint_chord, endpoint_quadrature,
                                   endpoint_ray_density, reflection_ray_prob,
                                   reflection_to_density)
from decay_lidar.decay_map import DecayGrid
from decay_lidar.grid import GridGeometry
from decay_lidar.likelihood import DENSITY, PROBABILITY, ray_density, ray_likelihood
from decay_lidar.scan import RANGE, SUB, SUP, Measurement
from decay_lidar.transforms import Pose
from conftest import identity_scan, random_unit
from oracles import brute_nearest, piecewise_midpoint, plane_crossings

ROW = GridGeometry((0, 0, 0), 1.0, (3, 1, 1))
START = Pose.from_xyz_yaw(0.0, 0.5, 0.5)


def test_reflection_counts():
    scan = identity_scan([[1, 0, 0], [1, 0, 0]], [RANGE, RANGE], [1.5, 2.5],
                         origin=(0.0, 0.5, 0.5))
    rm = build_reflection_map([scan], ROW, prior_q=0.05, unobserved_q=0.3)
    assert rm.hits.tolist() == [0, 1, 1]
    assert rm.misses.tolist() == [2, 1, 0]
    assert rm.q.tolist() == [0.0, 0.5, 1.0]
    untouched = build_reflection_map([scan], GridGeometry((0, 0, 0), 1.0, (3, 2, 1)),
                                     unobserved_q=0.3)
    assert untouched.q[3:].tolist() == [0.3, 0.3, 0.3]


def test_reflection_sup_and_sub_rays():
    scan = identity_scan([[1, 0, 0], [1, 0, 0]], [SUP, SUB], [0.0, 0.0], r_min=0.5,
                         r_max=2.5, origin=(0.0, 0.5, 0.5))
    rm = build_reflection_map([scan], ROW)
    assert rm.hits.sum() == 0
    assert rm.misses.tolist() == [1, 1, 1]


@pytest.mark.parametrize("q, r, expected", [
    ([0.0, 0.0, 1.0], 2.5, 1.0),
    ([0.5, 0.0, 0.0], 0.5, 0.5),
    ([0.2, 0.3, 0.0], 1.5, 0.24),
])
def test_reflection_ray_prob(q, r, expected):
    rm = ReflectionGrid.from_q(ROW, np.array(q))
    res = reflection_ray_prob(rm, Measurement.range(START, (1, 0, 0), r))
    assert res.kind == PROBABILITY
    assert res.value == pytest.approx(expected, rel=1e-12)


def test_reflection_blocked_path_has_zero_probability():
    rm = ReflectionGrid.from_q(ROW, np.array([1.0, 0.5, 0.5]))
    res = reflection_ray_prob(rm, Measurement.range(START, (1, 0, 0), 1.5))
    assert res.log_value == -math.inf


def test_reflection_density_conversion():
    half = GridGeometry((0, 0, 0), 0.5, (3, 1, 1))
    rm = ReflectionGrid.from_q(half, np.array([0.2, 0.3, 0.0]))
    m = Measurement.range(Pose.from_xyz_yaw(0.0, 0.25, 0.25), (1, 0, 0), 0.7)
    assert endpoint_chord(half, m) == pytest.approx(0.5)
    res = reflection_to_density(rm, m)
    assert res.kind == DENSITY and res.value == pytest.approx(0.48, rel=1e-12)
    # the density is flat over the chord, so integrating it recovers P
    rs = np.linspace(0.5, 1.0, 1001)[1:-1]
    vals = [reflection_to_density(rm, Measurement.range(m.pose, (1, 0, 0), r)).value
            for r in rs]
    assert np.ptp(vals) < 1e-12
    assert np.mean(vals) * 0.5 == pytest.approx(0.24, abs=1e-9)


def test_reflection_density_full_diagonal():
    cube = GridGeometry((0, 0, 0), 1.0, (1, 1, 1))
    rm = ReflectionGrid.from_q(cube, np.array([0.5]))
    d = np.ones(3) / math.sqrt(3)
    m = Measurement.range(Pose(np.zeros(3), (1, 0, 0, 0)), d, 1.0)
    assert endpoint_chord(cube, m) == pytest.approx(math.sqrt(3))
    assert reflection_to_density(rm, m).value == pytest.approx(0.5 / math.sqrt(3), rel=1e-9)


def test_reflection_normalization(rng):
    geom = GridGeometry((0, 0, 0), 0.5, (8, 8, 8))
    rm = ReflectionGrid.from_q(geom, rng.uniform(0, 0.4, geom.size), prior_q=0.05)
    for _ in range(5):
        d = random_unit(rng)
        pose = Pose(rng.uniform(1, 3, 3), (1, 0, 0, 0))
        r_min, r_max = 0.3, 5.0
        p_sub = ray_likelihood(rm, Measurement.sub(pose, d, r_min, r_max)).value
        p_sup = ray_likelihood(rm, Measurement.sup(pose, d, r_min, r_max)).value
        breaks = plane_crossings(geom, pose.position, d, r_max)
        breaks = np.unique(np.clip(np.append(breaks, r_min), r_min, r_max))

        def dens(rs):
            n = len(rs)
            return np.exp(rm.ray_log_likelihoods(np.tile(pose.position, (n, 1)),
                                                 np.tile(d, (n, 1)), np.full(n, RANGE), rs,
                                                 r_min, r_max))

        mass = piecewise_midpoint(dens, breaks, 1e-3)
        assert p_sub + mass + p_sup == pytest.approx(1.0, abs=1e-6)


def test_likelihood_field_examples():
    g = GridGeometry((0, 0, 0), 1.0, (3, 1, 1))
    scan = identity_scan([[1, 0, 0]], [RANGE], [0.5], origin=(0.0, 0.5, 0.5))
    field = build_likelihood_field([scan], g)
    assert field.nearest_dist.tolist() == [0.0, 1.0, 2.0]
    with pytest.raises(ValueError):
        build_likelihood_field([identity_scan([[1, 0, 0]], [SUP], [0.0])], g)


def test_likelihood_field_matches_brute_force(rng):
    g = GridGeometry((-1, -2, 0), 0.5, (14, 11, 9))
    pts = g.origin + rng.uniform(0, 1, (25, 3)) * (g.upper - g.origin)
    origin = np.zeros(3)
    vec = pts - origin
    r = np.linalg.norm(vec, axis=1)
    scan = identity_scan(vec / r[:, None], np.full(25, RANGE), r, r_max=50.0)
    field = build_likelihood_field([scan], g)
    occupied = np.unique(g.linear_index(*[np.floor((pts[:, a] - g.origin[a]) / 0.5).astype(int)
                                          for a in range(3)]))
    ref = brute_nearest(g.centers(), g.voxel_center(occupied))
    np.testing.assert_allclose(field.nearest_dist, ref, rtol=0, atol=1e-9)


def test_endpoint_out_of_range_split():
    g = GridGeometry((0, 0, 0), 1.0, (3, 1, 1))
    field = LikelihoodField(g, np.array([0.0, 1.0, 2.0]), 0.2, 0.1)
    sub = endpoint_ray_density(field, Measurement.sub(START, (1, 0, 0), 0.5, 3.0))
    sup = endpoint_ray_density(field, Measurement.sup(START, (1, 0, 0), 0.5, 3.0))
    assert sub.kind == PROBABILITY and sub.value == pytest.approx(0.05)
    assert sup.value == pytest.approx(0.05)


def _random_field(rng, geom, sigma=0.3):
    nd = rng.uniform(0.0, 1.5, geom.size)
    nd[rng.random(geom.size) < 0.2] = 0.0
    return LikelihoodField(geom, nd, sigma, 0.1)


def test_endpoint_density_normalizes(rng):
    g = GridGeometry((0, 0, 0), 0.5, (10, 10, 6))
    field = _random_field(rng, g)
    for _ in range(20):
        d = random_unit(rng)
        pose = Pose(rng.uniform(0.5, 2.5, 3), (1, 0, 0, 0))
        m = Measurement.sup(pose, d, 0.4, 7.0)
        nodes, h = endpoint_quadrature(field, m)
        n = len(nodes)
        dens = np.exp(field.ray_log_likelihoods(np.tile(pose.position, (n, 1)),
                                                np.tile(m.world_direction, (n, 1)),
                                                np.full(n, RANGE), nodes, 0.4, 7.0))
        assert float(np.sum(dens) * h) + 0.1 == pytest.approx(1.0, abs=1e-6)


def test_endpoint_peak_at_mapped_point(rng):
    g = GridGeometry((0, 0, 0), 0.5, (10, 2, 2))
    field = LikelihoodField(g, np.abs(np.arange(g.size) % 10 - 6) * 0.5, 0.2, 0.1)
    pose = Pose.from_xyz_yaw(0.0, 0.25, 0.25)
    dens = [endpoint_ray_density(field, Measurement.range(pose, (1, 0, 0), r, 0.2, 4.9)).value
            for r in np.arange(0.25, 4.9, 0.5)]
    assert int(np.argmax(dens)) == 6


def test_segment_normalizer_matches_direct_sum(rng):
    g = GridGeometry((-1, 0, 0.5), 0.5, (12, 9, 7))
    field = _random_field(rng, g)
    go, edge, dims = g.kernel_args()
    inv = 1.0 / (2 * field.sigma ** 2)
    cap = g.max_segments()
    buf_i, buf_d = np.empty(cap, np.int64), np.empty(cap)
    for _ in range(500):
        o = rng.uniform(-3, 7, 3)
        d = random_unit(rng)
        r_min, r_max = rng.uniform(0, 1), rng.uniform(2, 15)
        fast = _ray_normalizer(go, edge, dims, field.nearest_dist, inv, o, d, r_min, r_max,
                               buf_i, buf_d)
        slow = _ray_normalizer_direct(go, edge, dims, field.nearest_dist, inv, o, d, r_min, r_max)
        assert fast == pytest.approx(slow, rel=1e-9, abs=1e-12)


def test_endpoint_model_ignores_path_but_decay_does_not():
    g = GridGeometry((0, 0, 0), 1.0, (6, 1, 1))
    pose = Pose.from_xyz_yaw(0.0, 0.5, 0.5)
    ends = identity_scan([[1, 0, 0]], [RANGE], [4.5], origin=(0.0, 0.5, 0.5))
    # an extra mapped point on the path (voxel 1) that does not move the endpoint
    with_obstacle = identity_scan([[1, 0, 0], [1, 0, 0]], [RANGE, RANGE], [4.5, 1.5],
                                  origin=(0.0, 0.5, 0.5))
    f0 = build_likelihood_field([ends], g)
    f1 = build_likelihood_field([with_obstacle], g)
    end = np.array([[4.5, 0.5, 0.5]])
    assert f0.score(end)[0] == f1.score(end)[0] == 1.0

    m = Measurement.range(pose, (1, 0, 0), 4.5, 0.0, 6.0)
    clear = DecayGrid(g, [0.0, 0.0, 0.0, 0.0, 2.0, 0.0], 0.05, 0.05)
    blocked = clear.with_rates([0.0, 1.0, 0.0, 0.0, 2.0, 0.0])
    assert ray_density(blocked, m).value < ray_density(clear, m).value


def test_baselines_are_thread_independent(rng):
    g = GridGeometry((0, 0, 0), 0.5, (10, 10, 6))
    field = _random_field(rng, g)
    rm = ReflectionGrid.from_q(g, rng.uniform(0, 0.5, g.size))
    n = 3000
    o = np.tile([2.5, 2.5, 1.5], (n, 1))
    d = random_unit(rng, n)
    k = rng.integers(0, 3, n).astype(np.uint8)
    r = rng.uniform(0.4, 6.0, n)
    for smap in (field, rm):
        a = smap.ray_log_likelihoods(o, d, k, r, 0.4, 6.0, threads=1)
        b = smap.ray_log_likelihoods(o, d, k, r, 0.4, 6.0, threads=4)
        assert np.array_equal(a, b)
