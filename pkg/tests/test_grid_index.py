import math

import numpy as np
import pytest

from NeighborSearch.grid_index import GridIndex, build_index, count_within, knn_distance, knn_distance_bruteforce
from NeighborSearch.torus_geometry import PointSet, TorusPoint, canonicalize, torus_distances
from src.errors import ParameterError


def _points(*coords, d=1):
    return PointSet(d, np.array(coords, dtype=np.float64))


def test_build_index_empty():
    idx = build_index(PointSet.empty(2))
    assert idx.cells_per_axis == 1
    assert idx.buckets == {}
    assert knn_distance(idx, canonicalize([0.5, 0.5]), 1) == math.inf
    assert count_within(idx, canonicalize([0.5, 0.5]), 0.3) == 0


def test_single_point_bucket():
    idx = GridIndex(_points(0.5, 0.5, d=2), 2)
    assert idx.bucket((1, 1)) == [0]
    assert idx.bucket((0, 0)) == []


def test_every_point_sits_in_its_bucket():
    gen = np.random.default_rng(3)
    ps = PointSet(2, gen.random((10000, 2)))
    idx = build_index(ps, 2.0)
    assert idx.cells_per_axis == 70
    assert sum(len(members) for members in idx.buckets.values()) == len(ps)
    for index in gen.choice(len(ps), 200, replace=False):
        cell = tuple(np.floor(ps.coords[index] * idx.cells_per_axis).astype(int))
        assert index in idx.bucket(cell)


def test_cells_per_axis_on_perfect_powers():
    gen = np.random.default_rng(5)
    assert build_index(PointSet(3, gen.random((128, 3))), 2.0).cells_per_axis == 4
    assert build_index(PointSet(2, gen.random((50, 2))), 2.0).cells_per_axis == 5
    with pytest.raises(ParameterError):
        build_index(PointSet(2, gen.random((5, 2))), 0.0)


def test_knn_distance_examples():
    ps = _points(0.1, 0.9)
    idx = build_index(ps)
    assert np.isclose(knn_distance(idx, canonicalize([0.1]), 1, exclude=0), 0.2, atol=1e-12)
    assert knn_distance(build_index(_points(0.3)), canonicalize([0.3]), 1, exclude=0) == math.inf

    pair = _points([0.0, 0.0], [0.3, 0.4], d=2)
    assert np.isclose(knn_distance_bruteforce(pair, TorusPoint((0.0, 0.0)), 1, exclude=0), 0.5, atol=1e-12)
    assert knn_distance_bruteforce(pair, TorusPoint((0.0, 0.0)), 3) == math.inf
    assert knn_distance(build_index(pair), TorusPoint((0.0, 0.0)), 3) == math.inf


def test_count_within_examples():
    idx = build_index(_points(0.1, 0.9))
    assert count_within(idx, canonicalize([0.0]), 0.15) == 2
    assert count_within(idx, canonicalize([0.5]), 0.0) == 0
    assert count_within(idx, canonicalize([0.1]), 0.0) == 1
    assert count_within(idx, canonicalize([0.1]), 0.0, exclude=0) == 0


@pytest.mark.parametrize("d", [1, 2, 3])
def test_grid_matches_bruteforce_bit_for_bit(d):
    gen = np.random.default_rng(100 + d)
    ps = PointSet(d, gen.random((500, d)))
    for target in (0.7, 2.0, 6.0):
        idx = build_index(ps, target)
        queries = gen.random((200, d))
        for k in (1, 2, 5):
            grid = idx.knn_distances(queries, k)
            brute = [knn_distance_bruteforce(ps, TorusPoint(tuple(q)), k) for q in queries]
            assert np.array_equal(grid, np.array(brute))

        own = idx.knn_distances(ps.coords[:50], 3, exclude=np.arange(50))
        brute_own = [knn_distance_bruteforce(ps, p, 3, exclude=i) for i, p in enumerate(ps.points[:50])]
        assert np.array_equal(own, np.array(brute_own))


def test_knn_on_sparse_and_clustered_sets():
    gen = np.random.default_rng(9)
    # a cluster in one corner forces the shell search to wrap all the way around
    clustered = PointSet(2, np.vstack([gen.random((40, 2)) * 0.05, gen.random((3, 2))]))
    idx = build_index(clustered, 1.0)
    for q in gen.random((100, 2)):
        for k in (1, 4, 43, 44):
            assert knn_distance(idx, TorusPoint(tuple(q)), k) == knn_distance_bruteforce(clustered, TorusPoint(tuple(q)), k)


def test_count_within_consistent_with_knn():
    gen = np.random.default_rng(21)
    for d in (1, 2, 3):
        ps = PointSet(d, gen.random((300, d)))
        idx = build_index(ps)
        for q in gen.random((50, d)):
            x = TorusPoint(tuple(q))
            for k in (1, 3, 7):
                r = knn_distance(idx, x, k)
                assert count_within(idx, x, r) >= k
                assert count_within(idx, x, r - 1e-12) <= k - 1


def test_counts_within_matches_full_scan():
    gen = np.random.default_rng(4)
    ps = PointSet(2, gen.random((400, 2)))
    idx = build_index(ps)
    queries = gen.random((100, 2))
    for r in (0.0, 0.01, 0.07, 0.3, 0.8):
        expected = [int(np.count_nonzero(torus_distances(ps.coords, q) <= r)) for q in queries]
        assert np.array_equal(idx.counts_within(queries, r), expected)


def test_pairs_within_matches_full_scan():
    gen = np.random.default_rng(8)
    ps = PointSet(2, gen.random((250, 2)))
    i, j, dist = build_index(ps).pairs_within(0.06)

    expected = []
    for a in range(len(ps)):
        dists = torus_distances(ps.coords[a + 1:], ps.coords[a])
        expected.extend((a, a + 1 + b) for b in np.nonzero(dists <= 0.06)[0])
    assert list(zip(i.tolist(), j.tolist())) == expected
    assert np.all(i < j)
    assert np.allclose(dist, [torus_distances(ps.coords[a], ps.coords[b]) for a, b in expected])


def test_box_domain_does_not_wrap():
    ps = _points(0.05, 0.95)
    idx = build_index(ps, 1.0, origin=np.array([0.0]), span=1.0)
    assert not idx.periodic
    assert np.allclose(idx.knn_distances(ps.coords, 1, exclude=np.arange(2)), 0.9)
    assert np.allclose(idx.counts_within(ps.coords, 0.2), 1)

    torus = build_index(_points(0.02, 0.98))
    assert np.isclose(knn_distance(torus, canonicalize([0.02]), 1, exclude=0), 0.04)


def test_huge_radius_covers_the_domain():
    gen = np.random.default_rng(15)
    ps = PointSet(2, gen.random((2000, 2)))
    idx = build_index(ps)
    for r in (1e307, math.inf, 0.75):
        assert count_within(idx, canonicalize([0.5, 0.5]), r) == 2000
        assert np.all(idx.counts_within(ps.coords[:20], r, exclude=np.arange(20)) == 1999)

    small = PointSet(2, gen.random((30, 2)))
    i, j, dist = build_index(small).pairs_within(1e307)
    assert len(i) == 30 * 29 // 2
    assert np.all(i < j)

    box = build_index(small, 1.0, origin=np.zeros(2), span=1.0)
    assert np.all(box.counts_within(small.coords, 1e307) == 30)


def test_lattice_ties_match_bruteforce():
    # equidistant lattice neighbors defeat the tree's ordering and exercise the cell grid
    side = 20
    axis = (np.arange(side) + 0.5) / side
    ps = PointSet(2, np.array([[x, y] for x in axis for y in axis]))
    idx = build_index(ps)
    own = np.arange(0, len(ps), 7)
    for k in (1, 2, 4, 5, 8, 9):
        grid = idx.knn_distances(ps.coords[own], k, exclude=own)
        brute = [knn_distance_bruteforce(ps, ps.points[i], k, exclude=int(i)) for i in own]
        assert np.array_equal(grid, np.array(brute))
        assert np.array_equal(idx._knn_by_shells(ps.coords[own], k, own), grid)

    for r in (0.05, 1 / side, math.sqrt(2) / side, 0.1):
        expected = [int(np.count_nonzero(torus_distances(ps.coords, q) <= r)) for q in ps.coords[own]]
        assert np.array_equal(idx.counts_within(ps.coords[own], r), expected)


def test_knn_distance_is_nondecreasing_in_k():
    gen = np.random.default_rng(16)
    for d in (1, 2, 3):
        ps = PointSet(d, gen.random((400, d)))
        idx = build_index(ps)
        queries = gen.random((100, d))
        previous = np.zeros(len(queries))
        for k in range(1, 12):
            current = idx.knn_distances(queries, k)
            assert np.all(current >= previous)
            previous = current
