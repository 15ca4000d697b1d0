import math

import numpy as np
import pytest

from NeighborSearch.torus_geometry import PointSet
from src.errors import DimensionMismatchError, ParameterError
from src.knn_ball.analytic import expected_low_degree_count, radius_r_n
from src.knn_ball.nnball_process import MarkedPointSet, ProcessParams, build_L, build_L_truncated, \
    count_in_region, count_low_degree, geometric_graph, knn_radii, mark_value, tv_distance_atomic
from src.knn_ball.sampling import RngStream, sample_poisson_process


def test_mark_value():
    p = ProcessParams(100.0, 4.0, 1, 0.0, 1)
    assert np.isclose(mark_value(p, 0.03), 2.0)
    assert mark_value(p, 0.0) == -4.0
    assert mark_value(p, math.inf) == math.inf
    assert np.isclose(mark_value(p, radius_r_n(1.7, 100.0, 4.0, 1)), 1.7)


def test_process_params_validation():
    with pytest.raises(ParameterError):
        ProcessParams(100.0, 4.0, 0, 0.0, 1)
    with pytest.raises(ParameterError):
        ProcessParams(0.0, 4.0, 1, 0.0, 1)
    with pytest.raises(ParameterError):
        ProcessParams(100.0, 4.0, 1, 0.0, 0)


def test_build_L_small_sets_are_null():
    p = ProcessParams(100.0, 4.0, 2, 0.0, 1)
    assert len(build_L(p, PointSet(1, np.array([0.1, 0.5])))) == 0
    assert len(build_L(p, PointSet.empty(1))) == 0


def test_build_L_hand_computed():
    p = ProcessParams(100.0, 4.0, 1, 0.0, 1)
    marked = build_L(p, PointSet(1, np.array([0.1, 0.9])))
    assert len(marked) == 2
    assert np.allclose(marked.marks, 36.0)
    assert np.array_equal(marked.coords[:, 0], [0.1, 0.9])

    # a mark floor above 36 removes both atoms
    assert len(build_L(ProcessParams(100.0, 4.0, 1, 40.0, 1), PointSet(1, np.array([0.1, 0.9])))) == 0


def test_build_L_mean_count_matches_mecke():
    p = ProcessParams(1000.0, 6.0, 2, 0.0, 2)
    gen = RngStream(17).generator
    counts = [len(build_L(p, sample_poisson_process(p.n, p.d, gen))) for _ in range(1500)]
    expected = expected_low_degree_count(p.n, p.a_n, p.k, p.s0)
    stderr = np.std(counts, ddof=1) / math.sqrt(len(counts))
    assert abs(np.mean(counts) - expected) <= 4 * stderr


def test_build_L_truncated():
    p = ProcessParams(500.0, 3.0, 1, 0.0, 2)
    gen = RngStream(18).generator
    for _ in range(20):
        ps = sample_poisson_process(p.n, p.d, gen)
        full = build_L(p, ps)
        vacuous = build_L_truncated(p, ps, 1e-6)
        assert vacuous.atom_counter() == full.atom_counter()

        truncated = build_L_truncated(p, ps, 1e6)
        assert not (truncated.atom_counter() - full.atom_counter())

        radii = knn_radii(ps, p.k)
        below_all = (0.5 * radii.min() / math.sqrt(p.d)) ** (-p.d)
        assert len(build_L_truncated(p, ps, below_all)) == 0

    with pytest.raises(ParameterError):
        build_L_truncated(p, PointSet.empty(2), 0.0)


def test_count_low_degree_examples():
    assert count_low_degree(PointSet(1, np.array([0.4])), 0.3, 1) == 1
    assert count_low_degree(PointSet(1, np.array([0.1, 0.9])), 0.25, 1) == 0
    assert count_low_degree(PointSet.empty(2), 0.1, 1) == 0
    with pytest.raises(ParameterError):
        count_low_degree(PointSet(1, np.array([0.4])), -0.1, 1)


def test_count_low_degree_equals_build_L_size():
    p = ProcessParams(800.0, 4.0, 2, 0.5, 2)
    r = radius_r_n(p.s0, p.n, p.a_n, p.d)
    gen = RngStream(19).generator
    for _ in range(30):
        ps = sample_poisson_process(p.n, p.d, gen)
        assert count_low_degree(ps, r, p.k) == len(build_L(p, ps))


def test_count_low_degree_mean():
    n, a_n = 1000.0, 5.0
    r = radius_r_n(0.0, n, a_n, 2)
    gen = RngStream(20).generator
    counts = [count_low_degree(sample_poisson_process(n, 2, gen), r, 1) for _ in range(3000)]
    expected = expected_low_degree_count(n, a_n, 1, 0.0)
    assert np.isclose(expected, 6.737947, rtol=1e-6)
    assert abs(np.mean(counts) - expected) <= 4 * np.std(counts, ddof=1) / math.sqrt(len(counts))


def test_geometric_graph_degrees():
    gen = RngStream(21).generator
    ps = sample_poisson_process(400.0, 2, gen)
    r = 0.05
    graph = geometric_graph(ps, r)
    assert graph.number_of_nodes() == len(ps)
    for k in (1, 2, 4):
        low = sum(1 for _, degree in graph.degree() if degree <= k - 1)
        assert low == count_low_degree(ps, r, k)
    for i, j, weight in graph.edges(data="weight"):
        assert weight <= r


def test_count_in_region():
    marked = MarkedPointSet(2, np.array([[0.1, 0.1], [0.6, 0.2], [0.3, 0.4]]), np.array([0.5, 2.0, 3.0]))
    assert count_in_region(marked, np.zeros(2), np.full(2, 0.5), 0.0) == 2
    assert count_in_region(marked, np.zeros(2), np.full(2, 0.5), 1.0) == 1
    assert count_in_region(marked, np.zeros(2), np.zeros(2), -1.0) == 0


def test_tv_distance_atomic():
    a = MarkedPointSet(1, np.array([0.1]), np.array([1.0]))
    ab = MarkedPointSet(1, np.array([0.1, 0.2]), np.array([1.0, 2.0]))
    b = MarkedPointSet(1, np.array([0.2]), np.array([2.0]))
    assert tv_distance_atomic(ab, ab) == 0.0
    assert tv_distance_atomic(ab, a) == 1.0
    assert tv_distance_atomic(a, b) == 1.0
    assert tv_distance_atomic(MarkedPointSet.empty(1), ab) == 2.0
    with pytest.raises(DimensionMismatchError):
        tv_distance_atomic(a, MarkedPointSet.empty(2))


def test_marked_point_set_shapes():
    with pytest.raises(DimensionMismatchError):
        MarkedPointSet(1, np.array([0.1, 0.2]), np.array([1.0]))
    atoms = MarkedPointSet(1, np.array([0.1]), np.array([1.0])).atoms
    assert atoms[0][1] == 1.0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_mark_radius_and_count_thresholds_agree(k):
    n, a_n, d = 600.0, 4.0, 2
    ps = sample_poisson_process(n, d, RngStream(40 + k))
    radii = knn_radii(ps, k)
    marks = build_L(ProcessParams(n, a_n, k, -a_n - 1.0, d), ps).marks
    assert len(marks) == len(ps)
    for u in (0.0, 1.0, 2.0, 3.0, 4.0):
        r = radius_r_n(u, n, a_n, d)
        above = int(np.count_nonzero(marks > u))
        assert above == int(np.count_nonzero(radii > r))
        assert above == count_low_degree(ps, r, k)
        assert above == len(build_L(ProcessParams(n, a_n, k, u, d), ps))


def test_count_low_degree_with_a_huge_radius():
    ps = sample_poisson_process(300.0, 2, RngStream(44))
    assert count_low_degree(ps, 1e307, 1) == 0
    assert count_low_degree(ps, 1e307, len(ps)) == len(ps)


def test_tv_distance_atomic_is_a_metric():
    gen = RngStream(45).generator
    coords, marks = gen.random((12, 2)), gen.normal(size=12)

    def draw():
        multiplicity = gen.integers(0, 3, size=12)
        rows = np.repeat(np.arange(12), multiplicity)
        return MarkedPointSet(2, coords[rows], marks[rows])

    for _ in range(300):
        a, b, c = draw(), draw(), draw()
        assert tv_distance_atomic(a, b) == tv_distance_atomic(b, a)
        assert tv_distance_atomic(a, c) <= tv_distance_atomic(a, b) + tv_distance_atomic(b, c)
        assert tv_distance_atomic(a, a) == 0.0
