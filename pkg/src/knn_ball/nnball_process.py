import math

import numpy as np
import networkx as nx

from collections import Counter
from dataclasses import dataclass
from typing import List, Tuple

from NeighborSearch.grid_index import build_index
from NeighborSearch.torus_geometry import PointSet, TorusPoint, ball_volume_coeff, check_dimension
from src.errors import DimensionMismatchError, ParameterError


@dataclass(frozen=True, eq=False)
class MarkedPointSet:
    """
    Finite atoms (location, mark) on [0,1)^d x R. Locations are an (N, d) array and marks an (N,) array;
    row order carries no meaning.
    """
    dim: int
    coords: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        check_dimension(self.dim)
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, self.dim)
        marks = np.asarray(self.marks, dtype=np.float64).reshape(-1)
        if len(coords) != len(marks):
            raise DimensionMismatchError(f"{len(coords)} locations but {len(marks)} marks")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "marks", marks)

    def __len__(self) -> int:
        return len(self.marks)

    @property
    def atoms(self) -> List[Tuple[TorusPoint, float]]:
        return [(TorusPoint(tuple(float(c) for c in row)), float(mark)) for row, mark in zip(self.coords, self.marks)]

    @classmethod
    def empty(cls, d: int) -> "MarkedPointSet":
        return cls(d, np.empty((0, d)), np.empty(0))

    def select(self, mask: np.ndarray) -> "MarkedPointSet":
        return MarkedPointSet(self.dim, self.coords[mask], self.marks[mask])

    def atom_counter(self) -> Counter:
        """Multiset of atoms keyed by the exact (x_1, ..., x_d, mark) floats."""
        return Counter(tuple(row) + (mark,) for row, mark in zip(self.coords.tolist(), self.marks.tolist()))


@dataclass(frozen=True)
class ProcessParams:
    # intensity of the Poisson input, or point count of the binomial input
    n: float

    # centering a_n of the scaled ball volume
    a_n: float

    # neighbor rank
    k: int

    # mark floor: atoms are kept only when their mark exceeds s0
    s0: float

    d: int

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"k must be at least 1, got {self.k}")
        if self.n <= 0:
            raise ParameterError(f"n must be positive, got {self.n}")
        check_dimension(self.d)


def mark_values(p: ProcessParams, radii: np.ndarray) -> np.ndarray:
    radii = np.asarray(radii, dtype=np.float64)
    with np.errstate(over="ignore"):
        return p.n * ball_volume_coeff(p.d) * radii ** p.d - p.a_n


def mark_value(p: ProcessParams, r: float) -> float:
    """n * theta_d * r^d - a_n; an infinite radius maps to an infinite mark."""
    if math.isinf(r):
        return math.inf
    return float(mark_values(p, np.array([r]))[0])


def knn_radii(ps: PointSet, k: int, target_per_cell: float = 2.0) -> np.ndarray:
    """R_k of every point of ps against the rest of ps."""
    idx = build_index(ps, target_per_cell)
    return idx.knn_distances(ps.coords, k, exclude=np.arange(len(ps)))


def build_L(p: ProcessParams, ps: PointSet, target_per_cell: float = 2.0) -> MarkedPointSet:
    """
    The marked process of scaled k-nearest neighbor ball volumes.

    Args:
        p: process parameters
        ps: the configuration, Poisson or binomial
        target_per_cell: mean occupancy of the spatial index cells

    Returns:
        one atom (X, mark) per point whose mark exceeds s0, or the null measure when |ps| <= k

    """
    if len(ps) <= p.k:
        return MarkedPointSet.empty(ps.dim)

    marks = mark_values(p, knn_radii(ps, p.k, target_per_cell))
    return MarkedPointSet(ps.dim, ps.coords, marks).select(marks > p.s0)


def build_L_truncated(p: ProcessParams, ps: PointSet, b: float, target_per_cell: float = 2.0) -> MarkedPointSet:
    if b <= 0:
        raise ParameterError(f"b must be positive, got {b}")
    if len(ps) <= p.k:
        return MarkedPointSet.empty(ps.dim)

    radii = knn_radii(ps, p.k, target_per_cell)
    marks = mark_values(p, radii)
    threshold = math.sqrt(p.d) * b ** (-1.0 / p.d)
    return MarkedPointSet(ps.dim, ps.coords, marks).select((marks > p.s0) & (radii <= threshold))


def count_low_degree(ps: PointSet, r: float, k: int, target_per_cell: float = 2.0) -> int:
    """T: points whose closed ball of radius r holds at most k points, itself included."""
    if r < 0:
        raise ParameterError(f"radius must be non-negative, got {r}")
    if len(ps) == 0:
        return 0

    idx = build_index(ps, target_per_cell)
    others = idx.counts_within(ps.coords, r, exclude=np.arange(len(ps)))
    return int(np.count_nonzero(others <= k - 1))


def geometric_graph(ps: PointSet, r: float, target_per_cell: float = 2.0) -> nx.Graph:
    """Vertices are point indices; edges join points at torus distance <= r, weighted by that distance."""
    graph = nx.Graph()
    graph.add_nodes_from(range(len(ps)))
    i, j, dist = build_index(ps, target_per_cell).pairs_within(r)
    graph.add_weighted_edges_from(zip(i.tolist(), j.tolist(), dist.tolist()))
    return graph


def count_in_region(marked: MarkedPointSet, lower: np.ndarray, upper: np.ndarray, u: float) -> int:
    """L(B x (u, inf)) for the box B = [lower, upper)."""
    inside = np.all((marked.coords >= lower) & (marked.coords < upper), axis=1)
    return int(np.count_nonzero(inside & (marked.marks > u)))


def tv_distance_atomic(m1: MarkedPointSet, m2: MarkedPointSet) -> float:
    """
    Total variation distance sup_A |m1(A) - m2(A)| between two atomic measures,
    after matching identical atoms as multisets.
    """
    if m1.dim != m2.dim:
        raise DimensionMismatchError(f"measures of dimension {m1.dim} and {m2.dim}")

    c1, c2 = m1.atom_counter(), m2.atom_counter()
    surplus1 = sum((c1 - c2).values())
    surplus2 = sum((c2 - c1).values())
    return float(max(surplus1, surplus2))
