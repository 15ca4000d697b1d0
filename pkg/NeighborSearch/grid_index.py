import itertools
import logging
import math

import numpy as np

from scipy.spatial import cKDTree
from typing import Dict, Iterator, List, Optional, Tuple

from NeighborSearch.torus_geometry import (PointSet, TorusPoint, canonicalize_array, euclidean_distances,
                                           torus_distances)
from src.errors import DimensionMismatchError, ParameterError

logger = logging.getLogger(__name__)

# upper bound on candidate entries materialized per batch of queries
candidate_budget = 2 ** 22

# relative slack on cell-face bounds: floor() may place a coordinate one cell off near a face
face_slack = 1e-9

# relative band around a radius inside which kd-tree distances are re-derived with the exact metric
tree_band = 1e-9

# neighbors requested from the kd-tree beyond k and the excluded index
spare_neighbors = 2


class GridIndex:
    """
    A uniform cell grid over the flat torus (or over a closed box with the Euclidean metric),
    answering k-th nearest neighbor distances, fixed-radius counts and close pairs.
    Immutable after construction.

    A kd-tree over the same points proposes candidates. Every distance that decides a result is
    recomputed with the exact metric, and queries the tree cannot settle fall back to the cell grid.
    """

    def __init__(self, ps: PointSet, cells_per_axis: int, origin: Optional[np.ndarray] = None, span: float = 1.0):
        # the indexed configuration; row i of ps.coords is point index i
        self.points = ps
        self.dim = ps.dim

        # m_g, number of cells along every axis
        self.cells_per_axis = int(cells_per_axis)

        # no origin: the periodic unit torus. otherwise the box origin + [0, span]^d, no wrap
        self.periodic = origin is None
        self.origin = np.zeros(self.dim) if origin is None else np.asarray(origin, dtype=np.float64).reshape(self.dim)
        self.span = float(span)
        self.cell_side = self.span / self.cells_per_axis

        # largest distance between two points of the domain
        self.diameter = (0.5 if self.periodic else self.span) * math.sqrt(self.dim)

        # per-point integer cell coordinates, shape (N, d)
        self.point_cells = self.cell_of(ps.coords)

        # cell coordinate -> point indices stored in that cell
        self.buckets: Dict[Tuple[int, ...], List[int]] = {}
        for index, cell in enumerate(map(tuple, self.point_cells.tolist())):
            self.buckets.setdefault(cell, []).append(index)

        # dense (num_cells, max_occupancy) table of point indices, padded with -1
        self.cell_table = self._build_cell_table()

        self.tree = None
        if len(ps):
            self.tree = cKDTree(self._tree_coords(ps.coords), boxsize=1.0 if self.periodic else None)

    def __len__(self) -> int:
        return len(self.points)

    def cell_of(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, self.dim)
        cells = np.floor((coords - self.origin) / self.span * self.cells_per_axis).astype(np.int64)
        return np.clip(cells, 0, self.cells_per_axis - 1)

    def bucket(self, cell: Tuple[int, ...]) -> List[int]:
        return self.buckets.get(tuple(cell), [])

    def _tree_coords(self, coords: np.ndarray) -> np.ndarray:
        return canonicalize_array(coords) if self.periodic else coords

    def _build_cell_table(self) -> np.ndarray:
        shape = (self.cells_per_axis,) * self.dim
        num_cells = self.cells_per_axis ** self.dim
        if len(self.points) == 0:
            return np.full((num_cells, 1), -1, dtype=np.int64)

        flat = np.ravel_multi_index(tuple(self.point_cells.T), shape)
        occupancy = np.bincount(flat, minlength=num_cells)
        table = np.full((num_cells, max(1, int(occupancy.max()))), -1, dtype=np.int64)

        order = np.argsort(flat, kind="stable")
        starts = np.concatenate([[0], np.cumsum(occupancy)[:-1]])
        slots = np.arange(len(order)) - starts[flat[order]]
        table[flat[order], slots] = order
        return table

    def _metric(self, candidates: np.ndarray, queries: np.ndarray) -> np.ndarray:
        if self.periodic:
            return torus_distances(candidates, queries)
        return euclidean_distances(candidates, queries)

    def _member_distances(self, queries: np.ndarray, members: np.ndarray) -> np.ndarray:
        """Exact distances from each query row to its member indices; +inf where a member is -1."""
        dists = self._metric(self.points.coords[np.maximum(members, 0)], queries[:, None, :])
        dists[members < 0] = np.inf
        return dists

    def _excluded_distances(self, queries: np.ndarray, exclude: np.ndarray) -> np.ndarray:
        valid = (exclude >= 0) & (exclude < len(self.points))
        return self._member_distances(queries, np.where(valid, exclude, -1)[:, None])[:, 0]

    def _covers_everything(self, s: int) -> bool:
        if self.periodic:
            return 2 * s + 1 >= self.cells_per_axis
        return s >= self.cells_per_axis - 1

    def _shell_offsets(self, s: int) -> np.ndarray:
        """
        Cell offsets at Chebyshev distance exactly s. Once the shell wraps around the torus it
        holds every residue not yet visited, so no cell is ever scanned twice.
        """
        inner = s - 1
        if self.periodic and 2 * s + 1 >= self.cells_per_axis:
            axis = np.arange(self.cells_per_axis) if s == 0 else np.arange(-inner, self.cells_per_axis - inner)
        else:
            axis = np.arange(-s, s + 1)
        block = np.array(list(itertools.product(axis, repeat=self.dim)), dtype=np.int64).reshape(-1, self.dim)
        if s == 0:
            return block
        return block[np.any(np.abs(block) > inner, axis=1)]

    def _row_batches(self, num_rows: int, width: int) -> Iterator[slice]:
        rows = max(1, candidate_budget // max(1, width))
        for start in range(0, num_rows, rows):
            yield slice(start, min(start + rows, num_rows))

    def _candidates(self, queries: np.ndarray, cells: np.ndarray, exclude: np.ndarray,
                    offsets: np.ndarray) -> np.ndarray:
        """Exact distances to every indexed point in the cells at the given offsets, +inf on padding."""
        m = self.cells_per_axis
        target = cells[:, None, :] + offsets[None, :, :]
        if self.periodic:
            target = np.mod(target, m)
            valid = np.ones(target.shape[:2], dtype=bool)
        else:
            valid = np.all((target >= 0) & (target < m), axis=2)
            target = np.clip(target, 0, m - 1)

        flat = np.ravel_multi_index(tuple(np.moveaxis(target, 2, 0)), (m,) * self.dim)
        members = np.where(valid[:, :, None], self.cell_table[flat], -1).reshape(len(queries), -1)
        members[members == exclude[:, None]] = -1
        return self._member_distances(queries, members)

    def _prepare(self, queries, exclude) -> Tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise DimensionMismatchError(f"queries must have shape (q, {self.dim}), got {queries.shape}")
        if exclude is None:
            exclude = np.full(len(queries), -1, dtype=np.int64)
        else:
            exclude = np.asarray(exclude, dtype=np.int64).reshape(len(queries))
        return queries, exclude

    def knn_distances(self, queries: np.ndarray, k: int, exclude: Optional[np.ndarray] = None) -> np.ndarray:
        """
        k-th nearest neighbor distance of every query.

        The kd-tree returns the k + spare nearest points of each query. Their exact distances give the
        k-th value, which is final whenever the farthest returned point lies clearly beyond it.

        Args:
            queries: (q, d) array of query locations
            k: neighbor rank, k >= 1
            exclude: optional (q,) array of point indices to skip per query, -1 for none

        Returns:
            (q,) array of distances, +inf where fewer than k candidates exist

        """
        if k < 1:
            raise ParameterError(f"k must be at least 1, got {k}")
        queries, exclude = self._prepare(queries, exclude)
        result = np.full(len(queries), np.inf)
        if len(self.points) == 0 or len(queries) == 0:
            return result

        total = len(self.points)
        want = min(k + 1 + spare_neighbors, total)
        if want < k:
            return result

        tree_dists, tree_members = self.tree.query(self._tree_coords(queries), k=want)
        tree_dists = tree_dists.reshape(len(queries), want)
        tree_members = tree_members.reshape(len(queries), want)
        members = np.where(tree_members < total, tree_members, -1)
        members[members == exclude[:, None]] = -1
        dists = self._member_distances(queries, members)
        if want == k:
            result = dists.max(axis=1)
        else:
            result = np.partition(dists, k - 1, axis=1)[:, k - 1]

        if want == total:
            return result

        unsettled = np.flatnonzero(~(tree_dists[:, -1] > result * (1.0 + tree_band)))
        if unsettled.size:
            logger.debug("%d of %d knn queries fall back to the cell grid", unsettled.size, len(queries))
            result[unsettled] = self._knn_by_shells(queries[unsettled], k, exclude[unsettled])
        return result

    def _knn_by_shells(self, queries: np.ndarray, k: int, exclude: np.ndarray) -> np.ndarray:
        """k-th nearest neighbor distance by expanding shells of grid cells around each query."""
        cells = self.cell_of(queries)
        best = np.full((len(queries), k), np.inf)
        pending = np.arange(len(queries))
        s = 0
        while pending.size:
            offsets = self._shell_offsets(s)
            width = len(offsets) * self.cell_table.shape[1]
            for batch in self._row_batches(pending.size, width):
                rows = pending[batch]
                dists = self._candidates(queries[rows], cells[rows], exclude[rows], offsets)
                merged = np.concatenate([best[rows], dists], axis=1)
                best[rows] = np.partition(merged, k - 1, axis=1)[:, :k]

            if self._covers_everything(s):
                break
            # every unvisited cell lies at least s cell sides away from the query
            bound = s * self.cell_side * (1.0 - face_slack)
            pending = pending[best[pending].max(axis=1) > bound]
            s += 1

        return best.max(axis=1)

    def _covers_domain(self, r: float) -> bool:
        return r > self.diameter * (1.0 + tree_band)

    def counts_within(self, queries: np.ndarray, r: float, exclude: Optional[np.ndarray] = None) -> np.ndarray:
        """Number of indexed points at distance <= r from each query, skipping the excluded index."""
        if r < 0:
            raise ParameterError(f"radius must be non-negative, got {r}")
        queries, exclude = self._prepare(queries, exclude)
        counts = np.zeros(len(queries), dtype=np.int64)
        if len(self.points) == 0 or len(queries) == 0:
            return counts

        excluded = self._excluded_distances(queries, exclude)
        skipped = np.isfinite(excluded)
        if self._covers_domain(r):
            return len(self.points) - skipped.astype(np.int64)

        tree_queries = self._tree_coords(queries)
        inner = self.tree.query_ball_point(tree_queries, r * (1.0 - tree_band), return_length=True)
        outer = self.tree.query_ball_point(tree_queries, r * (1.0 + tree_band), return_length=True)
        inner = np.asarray(inner, dtype=np.int64).reshape(len(queries))
        outer = np.asarray(outer, dtype=np.int64).reshape(len(queries))

        # no tree distance near r: the tree count is exact
        counts = inner - (skipped & (excluded <= r))

        unsettled = np.flatnonzero(inner != outer)
        if unsettled.size:
            found = self.tree.query_ball_point(tree_queries[unsettled], r * (1.0 + tree_band))
            for row, members in zip(unsettled, found):
                members = np.asarray(members, dtype=np.int64)
                members = members[members != exclude[row]]
                dists = self._metric(self.points.coords[members], queries[row])
                counts[row] = int(np.count_nonzero(dists <= r))
        return counts

    def pairs_within(self, r: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        All index pairs i < j at distance <= r.

        Returns:
            (i, j, dist) arrays sorted by (i, j)

        """
        if r < 0:
            raise ParameterError(f"radius must be non-negative, got {r}")
        if len(self.points) < 2:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)

        if self._covers_domain(r):
            i, j = np.triu_indices(len(self.points), 1)
        else:
            pairs = self.tree.query_pairs(r * (1.0 + tree_band), output_type="ndarray").reshape(-1, 2)
            i, j = np.minimum(pairs[:, 0], pairs[:, 1]), np.maximum(pairs[:, 0], pairs[:, 1])

        coords = self.points.coords
        dist = self._metric(coords[i], coords[j])
        keep = dist <= r
        i, j, dist = i[keep].astype(np.int64), j[keep].astype(np.int64), dist[keep]
        order = np.lexsort((j, i))
        return i[order], j[order], dist[order]


def build_index(ps: PointSet, target_points_per_cell: float = 2.0, origin: Optional[np.ndarray] = None,
                span: float = 1.0) -> GridIndex:
    """
    Index a configuration with m_g = max(1, floor((N / target)^(1/d))) cells per axis.

    Args:
        ps: the configuration to index
        target_points_per_cell: desired mean occupancy of a cell
        origin: corner of a non-periodic box domain; None indexes the periodic torus
        span: side length of the box domain

    Returns:
        the GridIndex

    """
    if target_points_per_cell <= 0:
        raise ParameterError(f"target points per cell must be positive, got {target_points_per_cell}")

    ratio = len(ps) / target_points_per_cell
    m = int(math.floor(ratio ** (1.0 / ps.dim)))
    # floating point roots of perfect powers can land just below the integer
    while (m + 1) ** ps.dim <= ratio:
        m += 1
    m = max(1, m)

    logger.debug("indexed %d points in %d^%d cells", len(ps), m, ps.dim)
    return GridIndex(ps, m, origin=origin, span=span)


def _single_query(idx: GridIndex, x: TorusPoint) -> np.ndarray:
    if x.dim != idx.dim:
        raise DimensionMismatchError(f"query of dimension {x.dim} against an index of dimension {idx.dim}")
    return x.as_array().reshape(1, idx.dim)


def _single_exclude(exclude: Optional[int]) -> np.ndarray:
    return np.array([-1 if exclude is None else exclude], dtype=np.int64)


def knn_distance(idx: GridIndex, x: TorusPoint, k: int, exclude: Optional[int] = None) -> float:
    return float(idx.knn_distances(_single_query(idx, x), k, _single_exclude(exclude))[0])


def count_within(idx: GridIndex, x: TorusPoint, r: float, exclude: Optional[int] = None) -> int:
    return int(idx.counts_within(_single_query(idx, x), r, _single_exclude(exclude))[0])


def knn_distance_bruteforce(ps: PointSet, x: TorusPoint, k: int, exclude: Optional[int] = None) -> float:
    """Full scan and selection; the reference the grid search must reproduce exactly."""
    if k < 1:
        raise ParameterError(f"k must be at least 1, got {k}")
    if x.dim != ps.dim:
        raise DimensionMismatchError(f"query of dimension {x.dim} against points of dimension {ps.dim}")

    dists = torus_distances(ps.coords, x.as_array())
    if exclude is not None and 0 <= exclude < len(dists):
        dists[exclude] = np.inf
    if k > len(dists):
        return math.inf
    return float(np.partition(dists, k - 1)[k - 1])
