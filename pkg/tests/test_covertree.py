import itertools
import json
import math
import time

import numpy as np
import pytest

from stablegp import (
    build,
    cluster_assign,
    inducing_points,
    select_kmeans,
    select_uniform,
    separation,
    spatial_resolution,
)


def check_level_guarantees(tree, X):
    """Exact separation/resolution guarantees at every level, no tolerance."""
    for ell in range(tree.L + 1):
        pts = tree.level_locations(ell)
        threshold = tree.epsilon * 2.0 ** (tree.L - ell)
        assert separation(pts) >= threshold
        assert spatial_resolution(X, pts) <= threshold


def test_single_data_point():
    X = np.array([[1.5, -2.0]])
    tree = build(X, epsilon=0.3)
    assert tree.L == 1
    for ell in range(tree.L + 1):
        pts = tree.level_locations(ell)
        assert pts.shape[0] == 1
        assert np.allclose(pts[0], X[0], atol=0.0)
        assert separation(pts) == math.inf
    check_level_guarantees(tree, X)


def test_identical_points_degenerate():
    X = np.tile(np.array([[2.0, 3.0]]), (17, 1))
    tree = build(X, epsilon=0.5)
    assert tree.L == 1
    top = inducing_points(tree)
    assert top.m == 1
    assert np.allclose(top.points[0], [2.0, 3.0], atol=0.0)
    check_level_guarantees(tree, X)


def test_epsilon_larger_than_spread_collapses_to_one_point():
    X = np.array([[0.0], [1.0]])
    tree = build(X, epsilon=10.0)
    assert inducing_points(tree).m == 1
    check_level_guarantees(tree, X)


def test_build_input_validation():
    with pytest.raises(ValueError):
        build(np.zeros((0, 2)), epsilon=1.0)
    with pytest.raises(ValueError):
        build(np.zeros((3, 2)), epsilon=0.0)
    with pytest.raises(ValueError):
        build(np.zeros((3, 2)), epsilon=-1.0)


def test_root_is_data_mean():
    rng = np.random.default_rng(0)
    X = rng.uniform(-5.0, 5.0, size=(200, 3))
    tree = build(X, epsilon=1.0)
    assert np.allclose(tree.level_locations(0)[0], X.mean(axis=0), atol=1e-12)


def test_guarantees_uniform_square():
    rng = np.random.default_rng(1)
    X = rng.uniform(-5.0, 5.0, size=(1000, 2))
    tree = build(X, epsilon=0.5)
    assert tree.L >= 3
    check_level_guarantees(tree, X)


def test_guarantees_all_option_combinations():
    rng = np.random.default_rng(2)
    for lloyd, voronoi in itertools.product([False, True], repeat=2):
        for d in (1, 2, 3):
            X = rng.normal(size=(400, d)) * 3.0
            tree = build(X, epsilon=0.4, lloyd_averaging=lloyd, voronoi_repartition=voronoi, seed=7)
            check_level_guarantees(tree, X)


def test_assigned_sets_partition_data_at_every_level():
    rng = np.random.default_rng(3)
    X = rng.uniform(0.0, 1.0, size=(500, 2))
    tree = build(X, epsilon=0.05)
    for level in tree.levels:
        seen = np.concatenate([node.assigned for node in level])
        assert np.array_equal(np.sort(seen), np.arange(500))


def test_assigned_data_within_level_radius():
    rng = np.random.default_rng(4)
    X = rng.uniform(-2.0, 2.0, size=(600, 2))
    tree = build(X, epsilon=0.2)
    for ell, level in enumerate(tree.levels):
        radius = tree.radii[ell]
        for node in level:
            if node.assigned.size:
                dists = np.linalg.norm(X[node.assigned] - node.location, axis=1)
                assert np.max(dists) <= radius


def test_parents_within_parent_radius_of_children():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(800, 3))
    tree = build(X, epsilon=0.3)
    for ell in range(1, tree.L + 1):
        parent_locs = tree.level_locations(ell - 1)
        for node in tree.levels[ell]:
            gap = np.linalg.norm(parent_locs[node.parent] - node.location)
            assert gap <= tree.radii[ell - 1]


def test_r_neighbors_complete_by_brute_force():
    rng = np.random.default_rng(6)
    X = rng.uniform(-4.0, 4.0, size=(1500, 2))
    tree = build(X, epsilon=0.25)
    for ell, level in enumerate(tree.levels):
        locs = tree.level_locations(ell)
        radius = tree.neighbor_radii[ell]
        gaps = np.linalg.norm(locs[:, None, :] - locs[None, :, :], axis=2)
        for i, node in enumerate(level):
            # lists are self-inclusive: a node is trivially within its own radius
            expected = set(np.flatnonzero(gaps[i] <= radius).tolist())
            assert set(node.r_neighbors) == expected


def test_build_seed_determinism():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(300, 2))
    t1 = build(X, epsilon=0.3, seed=42)
    t2 = build(X, epsilon=0.3, seed=42)
    for ell in range(t1.L + 1):
        assert np.array_equal(t1.level_locations(ell), t2.level_locations(ell))


def test_inducing_points_levels_and_range():
    rng = np.random.default_rng(8)
    X = rng.uniform(-1.0, 1.0, size=(100, 2))
    tree = build(X, epsilon=0.2)
    assert inducing_points(tree, 0).m == 1
    top = inducing_points(tree)
    assert np.array_equal(top.points, tree.level_locations(tree.L))
    assert separation(top) >= tree.epsilon
    with pytest.raises(ValueError):
        inducing_points(tree, tree.L + 1)
    with pytest.raises(ValueError):
        inducing_points(tree, -1)


def test_tree_serializes_to_json():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(50, 2))
    tree = build(X, epsilon=0.5)
    payload = json.dumps(tree.to_json())
    obj = json.loads(payload)
    assert obj["L"] == tree.L
    assert len(obj["nodes"]) == sum(len(level) for level in tree.levels)
    assert all({"level", "location", "parent", "assigned"} <= set(n) for n in obj["nodes"])


def test_separation_examples():
    assert separation(np.array([[0.0], [1.0], [3.0]])) == 1.0
    assert separation(np.array([[2.0, 2.0]])) == math.inf
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(100, 3))
    brute = min(
        float(np.linalg.norm(pts[i] - pts[j]))
        for i in range(100)
        for j in range(i + 1, 100)
    )
    assert separation(pts) == pytest.approx(brute, rel=1e-12)


def test_spatial_resolution_examples():
    data = np.array([[0.0], [2.0]])
    assert spatial_resolution(data, data) == 0.0
    assert spatial_resolution(data, np.array([[0.0]])) == 2.0
    rng = np.random.default_rng(11)
    X = rng.normal(size=(120, 2))
    Z = rng.normal(size=(9, 2))
    brute = max(
        min(float(np.linalg.norm(x - z)) for z in Z) for x in X
    )
    assert spatial_resolution(X, Z) == pytest.approx(brute, rel=1e-12)


def test_cluster_assign_examples():
    data = np.array([[0.0], [0.4], [1.0]])
    z = np.array([[0.0], [1.0]])
    labels, counts = cluster_assign(data, z)
    assert np.array_equal(labels, [0, 0, 1])
    assert np.array_equal(counts, [2, 1])

    labels, counts = cluster_assign(z, z)
    assert np.array_equal(labels, [0, 1])
    assert np.array_equal(counts, [1, 1])

    # equidistant datum goes to the lowest index
    labels, _ = cluster_assign(np.array([[0.5]]), z)
    assert labels[0] == 0


def test_select_uniform():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(30, 2))
    all_of_it = select_uniform(X, 30, seed=0)
    assert np.array_equal(np.sort(all_of_it.points, axis=0), np.sort(X, axis=0))
    one = select_uniform(X, 1, seed=3)
    assert any(np.array_equal(one.points[0], row) for row in X)
    a = select_uniform(X, 10, seed=5)
    b = select_uniform(X, 10, seed=5)
    assert np.array_equal(a.points, b.points)
    assert len({tuple(p) for p in a.points}) == 10
    with pytest.raises(ValueError):
        select_uniform(X, 31, seed=0)


def test_select_kmeans():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(25, 2))
    everything = select_kmeans(X, 25, iters=5, seed=0)
    assert np.allclose(np.sort(everything.points, axis=0), np.sort(X, axis=0), atol=1e-12)

    blob_a = rng.normal(loc=-10.0, scale=0.1, size=(40, 1))
    blob_b = rng.normal(loc=10.0, scale=0.1, size=(60, 1))
    blobs = np.vstack([blob_a, blob_b])
    got = select_kmeans(blobs, 2, iters=20, seed=1)
    centers = np.sort(got.points[:, 0])
    assert centers[0] == pytest.approx(float(blob_a.mean()), abs=1e-9)
    assert centers[1] == pytest.approx(float(blob_b.mean()), abs=1e-9)

    r1 = select_kmeans(X, 5, iters=10, seed=9)
    r2 = select_kmeans(X, 5, iters=10, seed=9)
    assert np.array_equal(r1.points, r2.points)
    with pytest.raises(ValueError):
        select_kmeans(X, 26, iters=5, seed=0)


def test_build_near_linear_scaling():
    rng = np.random.default_rng(14)
    X = rng.uniform(0.0, 10.0, size=(16_000, 2))
    epsilon = 0.15

    def timed(pts):
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            build(pts, epsilon=epsilon)
            best = min(best, time.perf_counter() - t0)
        return best

    small = timed(X[:8000])
    large = timed(X)
    assert large / small <= 2.8
