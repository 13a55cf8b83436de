import numpy as np
import pytest

from decay_lidar.decay_map import MapAccumulator, build_decay_map, finalize, integrate_scans, merge
from decay_lidar.grid import GridGeometry
from decay_lidar.scan import RANGE, SUB, SUP, Measurement
from decay_lidar.simulator import sample_scan
from decay_lidar.transforms import Pose
from conftest import identity_scan, random_decay_grid, random_unit

ORIGIN = Pose.identity()


def test_single_range_ray_in_one_voxel():
    g = GridGeometry((-5, -5, -5), 10.0, (1, 1, 1))
    acc = MapAccumulator(g).integrate(Measurement.range(ORIGIN, (1, 0, 0), 2.0))
    assert acc.hits[0] == 1 and acc.dist[0] == pytest.approx(2.0, abs=1e-12)


def test_sup_ray_adds_distance_only():
    g = GridGeometry((0, 0, 0), 1.0, (5, 1, 1))
    m = Measurement.sup(Pose.from_xyz_yaw(0, 0.5, 0.5), (1, 0, 0), r_max=5.0)
    acc = MapAccumulator(g).integrate(m)
    np.testing.assert_allclose(acc.dist, 1.0, atol=1e-12)
    assert acc.hits.sum() == 0 and acc.outside_hits == 0


def test_hits_and_distances_add_up():
    g = GridGeometry((-5, -5, -5), 10.0, (1, 1, 1))
    acc = MapAccumulator(g)
    for d in ((1, 0, 0), (0, 1, 0), (0, 0, -1)):
        acc.integrate(Measurement.range(ORIGIN, d, 2.0))
    assert acc.hits[0] == 3 and acc.dist[0] == pytest.approx(6.0)
    assert finalize(acc).rate[0] == pytest.approx(0.5)


def test_sub_rays_are_skipped_and_counted():
    g = GridGeometry((-5, -5, -5), 10.0, (1, 1, 1))
    acc = MapAccumulator(g).integrate(Measurement.sub(ORIGIN, (1, 0, 0), r_min=1.0))
    assert acc.hits.sum() == 0 and acc.dist.sum() == 0
    assert acc.stats.skipped_sub == 1


def test_ranges_leaving_the_grid_count_outside():
    g = GridGeometry((0, 0, 0), 1.0, (1, 1, 1))
    acc = MapAccumulator(g).integrate(
        Measurement.range(Pose.from_xyz_yaw(0.5, 0.5, 0.5), (1, 0, 0), 3.0))
    assert acc.outside_hits == 1 and acc.outside_dist == pytest.approx(2.5)
    assert acc.dist[0] == pytest.approx(0.5) and acc.hits[0] == 0


def test_finalize_examples():
    g = GridGeometry((0, 0, 0), 1.0, (3, 1, 1))
    acc = MapAccumulator(g, np.array([3, 0, 0]), np.array([6.0, 10.0, 0.0]))
    grid = finalize(acc, prior_rate=0.05, unobserved_rate=0.2)
    assert grid.rate.tolist() == [0.5, 0.0, 0.2]
    assert grid.prior_rate == 0.05
    assert finalize(acc).rate[2] == 0.05
    assert grid.mean_free_path()[0] == pytest.approx(2.0)
    assert np.isinf(grid.mean_free_path()[1])


def test_rate_cap():
    g = GridGeometry((0, 0, 0), 1.0, (1, 1, 1))
    acc = MapAccumulator(g, np.array([1]), np.array([1e-9]))
    assert finalize(acc, rate_cap=1e4).rate[0] == 1e4


def test_endpoint_on_boundary_gets_minimum_distance():
    g = GridGeometry((0, 0, 0), 1.0, (3, 1, 1))
    # the endpoint x = 2.0 lies on the face of voxel 2, which the ray never enters
    acc = MapAccumulator(g).integrate(
        Measurement.range(Pose.from_xyz_yaw(0.5, 0.5, 0.5), (1, 0, 0), 1.5))
    assert acc.hits[2] == 1
    assert acc.dist[2] == pytest.approx(1e-9)
    assert np.all(acc.dist[acc.hits > 0] > 0)


def _random_scans(rng, world, count=4, rays=2500):
    scans = []
    for _ in range(count):
        pose = Pose(world.geom.origin + rng.uniform(0.5, 3.0, 3), (1.0, 0.0, 0.0, 0.0))
        scans.append(sample_scan(world, pose, random_unit(rng, rays), 0.2, 8.0, rng))
    return scans


def test_merge_identity_commutativity_and_shards(rng):
    world = random_decay_grid(rng)
    scans = _random_scans(rng, world)
    g = world.geom
    seq = integrate_scans(MapAccumulator(g), scans)
    assert sum(len(s) for s in scans) == 10000

    empty = MapAccumulator(g)
    m0 = merge(seq, empty)
    assert np.array_equal(m0.hits, seq.hits) and np.array_equal(m0.dist, seq.dist)

    parts = [integrate_scans(MapAccumulator(g), [s]) for s in scans]
    ab, ba = merge(parts[0], parts[1]), merge(parts[1], parts[0])
    assert np.array_equal(ab.hits, ba.hits) and np.array_equal(ab.dist, ba.dist)

    merged = parts[0]
    for p in parts[1:]:
        merged = merge(merged, p)
    assert np.array_equal(merged.hits, seq.hits)
    np.testing.assert_allclose(merged.dist, seq.dist, rtol=0, atol=1e-12)
    assert merged.stats.rays == seq.stats.rays == 10000


def test_merge_rejects_other_geometry():
    a = MapAccumulator(GridGeometry((0, 0, 0), 1.0, (2, 2, 2)))
    b = MapAccumulator(GridGeometry((0, 0, 0), 0.5, (2, 2, 2)))
    with pytest.raises(ValueError):
        merge(a, b)


def test_threads_do_not_change_accumulators(rng):
    world = random_decay_grid(rng)
    scans = _random_scans(rng, world)
    a = integrate_scans(MapAccumulator(world.geom), scans, threads=1)
    b = integrate_scans(MapAccumulator(world.geom), scans, threads=4)
    assert np.array_equal(a.hits, b.hits)
    np.testing.assert_allclose(a.dist, b.dist, rtol=0, atol=1e-12)


def test_build_decay_map_uses_hits_over_distance():
    dirs = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    scan = identity_scan(dirs, [RANGE, SUP, SUB], [1.25, 0.0, 0.0], r_min=0.5, r_max=3.0,
                         origin=(0.5, 0.5, 0.5))
    g = GridGeometry((0, 0, 0), 1.0, (4, 4, 1))
    grid = build_decay_map([scan], g, prior_rate=0.01)
    # voxel (1,0,0): one hit, travelled 0.75 (hit ray) + 1.0 (sup ray)
    assert grid.rate[g.linear_index(1, 0, 0)] == pytest.approx(1 / 1.75)
    assert grid.rate[g.linear_index(2, 0, 0)] == 0.0
    assert grid.rate[g.linear_index(0, 1, 0)] == 0.01
