import math
import logging

import numpy as np

from dataclasses import dataclass
from typing import Iterator, List, Tuple

from scipy import integrate

from NeighborSearch.grid_index import build_index
from NeighborSearch.torus_geometry import PointSet, check_dimension
from src.errors import ConfigError, DegenerateInteriorError, ParameterError
from src.knn_ball.analytic import alpha_k, radius_r_n
from src.knn_ball.nnball_process import MarkedPointSet, ProcessParams, mark_values
from src.utils import log_factorial, mark_truncation, min_quadrature_nodes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CubePartition:
    """The torus cut into m^d congruent half-open cubes of side 1/m, indexed row-major."""
    dim: int

    # cubes per axis
    m: int

    @property
    def b_eff(self) -> int:
        return self.m ** self.dim

    @property
    def side(self) -> float:
        return 1.0 / self.m

    def corner(self, cube: int) -> np.ndarray:
        """z, the lower corner of the cube."""
        return np.array(np.unravel_index(cube, (self.m,) * self.dim), dtype=np.float64) / self.m

    def cube_of(self, coords: np.ndarray) -> np.ndarray:
        cells = np.clip(np.floor(np.asarray(coords) * self.m).astype(np.int64), 0, self.m - 1)
        if len(cells) == 0:
            return np.empty(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(cells.T), (self.m,) * self.dim)

    def to_local(self, cube: int, coords: np.ndarray) -> np.ndarray:
        """kappa^{-1}: map points of the cube onto [0,1)^d."""
        return (coords - self.corner(cube)) * self.m

    def from_local(self, cube: int, local: np.ndarray) -> np.ndarray:
        return self.corner(cube) + local / self.m


def make_partition(b_target: float, d: int) -> CubePartition:
    """Round b_target to the nearest perfect d-th power m^d, at least 1."""
    if not b_target > 0:
        raise ParameterError(f"b_target must be positive, got {b_target}")
    check_dimension(d)
    return CubePartition(d, max(1, int(round(b_target ** (1.0 / d)))))


@dataclass(frozen=True, eq=False)
class CubeSplit:
    # lower corner and side of the cube Q
    corner: np.ndarray
    side: float

    # width of the boundary shell M along every face
    shell: float

    @property
    def interior_lower(self) -> np.ndarray:
        return self.corner + self.shell

    @property
    def interior_upper(self) -> np.ndarray:
        return self.corner + self.side - self.shell

    @property
    def interior_volume(self) -> float:
        return (self.side - 2 * self.shell) ** len(self.corner)

    @property
    def boundary_volume(self) -> float:
        return self.side ** len(self.corner) - self.interior_volume

    def in_cube(self, coords: np.ndarray) -> np.ndarray:
        return np.all((coords >= self.corner) & (coords < self.corner + self.side), axis=-1)

    def in_interior(self, coords: np.ndarray) -> np.ndarray:
        return np.all((coords >= self.interior_lower) & (coords < self.interior_upper), axis=-1)

    def in_boundary(self, coords: np.ndarray) -> np.ndarray:
        return self.in_cube(coords) & ~self.in_interior(coords)


def split_cube(part: CubePartition, cube: int, shell: float) -> CubeSplit:
    """Interior K = [z + shell, z + side - shell)^d and boundary M = Q \\ K of one cube."""
    if shell < 0:
        raise ParameterError(f"shell must be non-negative, got {shell}")
    if 2 * shell >= part.side:
        raise DegenerateInteriorError(f"shell {shell} leaves no interior in cubes of side {part.side}")
    if not 0 <= cube < part.b_eff:
        raise ParameterError(f"cube index {cube} outside 0..{part.b_eff - 1}")
    return CubeSplit(part.corner(cube), part.side, shell)


def boundary_width(a_n: float, w_rule: str = "sqrt") -> float:
    """
    w_n from its rule: "sqrt" gives sqrt(a_n), "power:p" gives a_n^p for 0 < p < 1.
    """
    if a_n <= 0:
        raise ConfigError(f"a boundary width needs a_n > 0, got {a_n}")
    if w_rule == "sqrt":
        return math.sqrt(a_n)
    if w_rule.startswith("power:"):
        try:
            power = float(w_rule.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"cannot read the exponent of w rule {w_rule!r}")
        if not 0 < power < 1:
            raise ConfigError(f"w rule exponent must lie in (0, 1), got {power}")
        return a_n ** power
    raise ConfigError(f"unknown w rule {w_rule!r}, expected 'sqrt' or 'power:<p>'")


@dataclass(frozen=True)
class BlockedConfig:
    partition: CubePartition

    # r_n(w_n), the width of every boundary shell and the truncation radius of eta'
    shell: float

    w_n: float

    def __post_init__(self):
        if 2 * self.shell >= self.partition.side:
            raise DegenerateInteriorError(
                f"shell r_n(w_n)={self.shell:.6g} leaves no interior in cubes of side {self.partition.side:.6g}")

    def split(self, cube: int) -> CubeSplit:
        return split_cube(self.partition, cube, self.shell)


def blocked_config(p: ProcessParams, b_target: float, w_rule: str = "sqrt") -> BlockedConfig:
    w_n = boundary_width(p.a_n, w_rule)
    return BlockedConfig(make_partition(b_target, p.d), radius_r_n(w_n, p.n, p.a_n, p.d), w_n)


def _cube_marks(p: ProcessParams, ps: PointSet, cfg: BlockedConfig,
                target_per_cell: float) -> Iterator[Tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """
    For every cube: its points, their cube-restricted R_k (Euclidean, no wrap), the marks and the
    interior mask. Cubes with fewer than k + 1 points give R_k = +inf.
    """
    part = cfg.partition
    cubes = part.cube_of(ps.coords)
    for cube in range(part.b_eff):
        coords = ps.coords[cubes == cube]
        if len(coords) == 0:
            continue
        cube_ps = PointSet(ps.dim, coords)
        idx = build_index(cube_ps, target_per_cell, origin=part.corner(cube), span=part.side)
        radii = idx.knn_distances(coords, p.k, exclude=np.arange(len(coords)))
        yield cube, coords, radii, mark_values(p, radii), cfg.split(cube).in_interior(coords)


def _eta_parts(p: ProcessParams, ps: PointSet, cfg: BlockedConfig, truncated: bool,
               target_per_cell: float) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
    for cube, coords, radii, marks, interior in _cube_marks(p, ps, cfg, target_per_cell):
        keep = interior & (marks > p.s0)
        if truncated:
            keep &= radii <= cfg.shell
        yield cube, coords[keep], marks[keep]


def _assemble(d: int, parts: List[Tuple[int, np.ndarray, np.ndarray]]) -> MarkedPointSet:
    if not parts:
        return MarkedPointSet.empty(d)
    return MarkedPointSet(d, np.concatenate([c for _, c, _ in parts]), np.concatenate([m for _, _, m in parts]))


def build_eta(p: ProcessParams, ps: PointSet, cfg: BlockedConfig, target_per_cell: float = 2.0) -> MarkedPointSet:
    """
    Blocked marked process: atoms at the interior points of every cube, marked from the configuration
    restricted to that cube. Locations stay in torus coordinates.
    """
    return _assemble(ps.dim, list(_eta_parts(p, ps, cfg, False, target_per_cell)))


def build_eta_truncated(p: ProcessParams, ps: PointSet, cfg: BlockedConfig,
                        target_per_cell: float = 2.0) -> MarkedPointSet:
    """build_eta keeping only atoms whose cube-restricted R_k is at most r_n(w_n)."""
    return _assemble(ps.dim, list(_eta_parts(p, ps, cfg, True, target_per_cell)))


def eta_components(p: ProcessParams, ps: PointSet, cfg: BlockedConfig,
                   target_per_cell: float = 2.0) -> List[MarkedPointSet]:
    """The per-cube processes, each pulled back to [0,1)^d through kappa^{-1}."""
    components = [MarkedPointSet.empty(ps.dim) for _ in range(cfg.partition.b_eff)]
    for cube, coords, marks in _eta_parts(p, ps, cfg, False, target_per_cell):
        components[cube] = MarkedPointSet(ps.dim, cfg.partition.to_local(cube, coords), marks)
    return components


def per_cube_counts(p: ProcessParams, ps: PointSet, cfg: BlockedConfig, target_per_cell: float = 2.0) -> np.ndarray:
    counts = np.zeros(cfg.partition.b_eff, dtype=np.int64)
    for cube, coords, _ in _eta_parts(p, ps, cfg, False, target_per_cell):
        counts[cube] = len(coords)
    return counts


def mean_measure_gap(p: ProcessParams, cfg: BlockedConfig) -> float:
    """
    Total variation distance between the intensity of one pulled-back cube process and Leb x tau_k.

    The boundary shell carries no atoms, so it contributes its whole reference mass. On the interior
    the mark density of the unrestricted process, (n / b_eff) e^{-(a_n+u)} (a_n+u)^{k-1} / (k-1)!,
    is compared against e^{-u} / (k-1)! over [s0, s0 + mark_truncation].
    """
    part = cfg.partition
    interior = (1.0 - 2.0 * cfg.shell * part.m) ** p.d
    scale = p.n / part.b_eff
    log_norm = log_factorial(p.k - 1)

    def density_gap(u: float) -> float:
        lam = max(p.a_n + u, 0.0)
        blocked = scale * math.exp(-lam - log_norm) * lam ** (p.k - 1)
        return abs(blocked - math.exp(-u - log_norm))

    gap, _ = integrate.quad(density_gap, p.s0, p.s0 + mark_truncation, limit=min_quadrature_nodes)
    logger.debug("mean measure gap: boundary %.3g, interior %.3g", (1 - interior) * alpha_k(p.k, p.s0), gap)
    return (1.0 - interior) * alpha_k(p.k, p.s0) + interior * gap
