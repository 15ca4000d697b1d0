import math
import logging

import numpy as np

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

from scipy import optimize, special, stats

from NeighborSearch.torus_geometry import ball_volume_coeff, check_dimension
from src.errors import DomainError, ParameterError
from src.utils import boundary_slope_tolerance, log_factorial, mark_truncation, min_quadrature_nodes

logger = logging.getLogger(__name__)


def _check_k(k: int):
    if int(k) != k or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k}")


def scaling_b_n(n: float, a_n: float, k: int) -> float:
    """b_n = n * a_n^(k-1) * exp(-a_n)."""
    _check_k(k)
    return n * a_n ** (k - 1) * math.exp(-a_n)


def radius_r_n(u: float, n: float, a_n: float, d: int) -> float:
    """The radius at which the mark n * theta_d * r^d - a_n equals u."""
    if a_n + u < 0:
        raise DomainError(f"a_n + u must be non-negative, got {a_n + u}")
    return ((a_n + u) / (n * ball_volume_coeff(d))) ** (1.0 / d)


def alpha_k(k: int, s0: float) -> float:
    _check_k(k)
    return math.exp(-s0 - log_factorial(k - 1))


def tau_k_density(u: float, k: int, s0: float) -> float:
    _check_k(k)
    if u < s0:
        return 0.0
    return math.exp(-u - log_factorial(k - 1))


def tau_mass(k: int, s0: float, u_low: float, u_high: float) -> float:
    """Exact tau_k mass of [u_low, u_high]; u_high may be +inf."""
    _check_k(k)
    u_low = max(u_low, s0)
    if u_high <= u_low:
        return 0.0
    head = math.exp(-u_low - log_factorial(k - 1))
    if math.isinf(u_high):
        return head
    return head * -math.expm1(-(u_high - u_low))


def rate_I_k(x: float, k: int, s0: float) -> float:
    """Poisson rate function x log(x / alpha_k) - x + alpha_k, +inf below zero."""
    alpha = alpha_k(k, s0)
    if x < 0:
        return math.inf
    if x == 0:
        return alpha
    return x * math.log(x / alpha) - x + alpha


def entropy_H(x: float) -> float:
    if x < 0:
        raise DomainError(f"H is defined for x >= 0, got {x}")
    if x == 0:
        return 1.0
    return x * math.log(x) + 1 - x


def sandwich_failure_bound(n: float, a_n: float, eps: float) -> float:
    """
    Upper bound on the probability that the thinned/augmented sandwich around a binomial sample fails.

    Args:
        n: intensity of the base Poisson process
        a_n: centering; the thinning and augmentation fraction is eps / a_n
        eps: coupling slack, 0 <= eps < a_n

    Returns:
        exp(-n(1+t) H(1/(1+t))) + exp(-n(1-t) H(1/(1-t))) with t = eps / a_n

    """
    if eps < 0 or eps >= a_n:
        raise DomainError(f"eps must lie in [0, a_n), got eps={eps}, a_n={a_n}")
    t = eps / a_n
    upper = n * (1 + t) * entropy_H(1 / (1 + t))
    lower = n * (1 - t) * entropy_H(1 / (1 - t))
    return math.exp(-upper) + math.exp(-lower)


def expected_low_degree_count(n: float, a_n: float, k: int, s0: float) -> float:
    """E[T] = n * P(Poisson(a_n + s0) <= k - 1), exact at every n on the torus."""
    _check_k(k)
    lam = a_n + s0
    if lam < 0:
        raise DomainError(f"a_n + s0 must be non-negative, got {lam}")
    return float(n * stats.poisson.cdf(k - 1, lam))


def expected_low_degree_count_binomial(n: int, a_n: float, k: int, s0: float) -> float:
    """Binomial-input analogue: n * P(Binomial(n - 1, (a_n + s0) / n) <= k - 1)."""
    _check_k(k)
    p = (a_n + s0) / n
    if not 0 <= p <= 1:
        raise DomainError(f"ball volume (a_n + s0) / n must lie in [0, 1], got {p}")
    return float(n * stats.binom.cdf(k - 1, n - 1, p))


def intensity_tail(n: float, a_n: float, k: int, u: float, leb_B: float) -> float:
    _check_k(k)
    if not 0 <= leb_B <= 1:
        raise DomainError(f"Leb(B) must lie in [0, 1], got {leb_B}")
    lam = a_n + u
    if lam < 0:
        raise DomainError(f"a_n + u must be non-negative, got {lam}")
    return float(n * leb_B * stats.poisson.cdf(k - 1, lam))


def tail_threshold(x: float, b: float, upper: bool) -> int:
    """Integer cut of the event {T / b >= x} (upper) or {T / b <= x} (lower)."""
    return int(math.ceil(x * b)) if upper else int(math.floor(x * b))


def poisson_tail_rate(b: float, alpha: float, x: float, upper: bool = True) -> float:
    """Exact -(1/b) log P(Poisson(b * alpha) >= x b), or <= x b for the lower tail."""
    mean = b * alpha
    cut = tail_threshold(x, b, upper)
    if upper:
        log_p = stats.poisson.logsf(cut - 1, mean)
    else:
        log_p = stats.poisson.logcdf(cut, mean) if cut >= 0 else -math.inf
    return float(-log_p / b)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """
    A piecewise constant density h(x, u) with respect to Leb x tau_k on [0,1]^d x [u_edges[0], u_edges[-1]].
    values[i, j] is h on spatial cell i (row-major over x_cells^d equal cubes) and mark cell j.
    """
    d: int
    u_edges: np.ndarray
    values: np.ndarray
    x_cells: int = 1

    def __post_init__(self):
        check_dimension(self.d)
        edges = np.asarray(self.u_edges, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64).reshape(self.x_cells ** self.d, len(edges) - 1)
        if np.any(np.diff(edges) <= 0):
            raise DomainError("mark cell edges must be increasing")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DomainError("density values must be finite and non-negative")
        object.__setattr__(self, "u_edges", edges)
        object.__setattr__(self, "values", values)

    @property
    def u_max(self) -> float:
        return float(self.u_edges[-1])

    def weights(self, k: int, s0: float) -> np.ndarray:
        """(Leb x tau_k) mass of every cell, exact."""
        u_mass = np.array([tau_mass(k, s0, lo, hi) for lo, hi in zip(self.u_edges[:-1], self.u_edges[1:])])
        return np.full((self.x_cells ** self.d, 1), 1.0 / self.x_cells ** self.d) * u_mass[None, :]

    def mass(self, k: int, s0: float) -> float:
        return math.fsum((self.weights(k, s0) * self.values).ravel())

    @classmethod
    def constant(cls, c: float, d: int, s0: float, nodes: int = min_quadrature_nodes,
                 x_cells: int = 1) -> "DensityGrid":
        edges = np.linspace(s0, s0 + mark_truncation, nodes + 1)
        return cls(d, edges, np.full((x_cells ** d, nodes), float(c)), x_cells)

    @classmethod
    def from_function(cls, h: Callable[[np.ndarray, np.ndarray], np.ndarray], d: int, s0: float,
                      nodes: int = min_quadrature_nodes, x_cells: int = 1) -> "DensityGrid":
        """Sample h(x, u) at cell midpoints; x is a (cells, d) array and u a (nodes,) array."""
        edges = np.linspace(s0, s0 + mark_truncation, nodes + 1)
        axis = (np.arange(x_cells) + 0.5) / x_cells
        centers = np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T
        return cls(d, edges, h(centers, 0.5 * (edges[:-1] + edges[1:])), x_cells)


def relative_entropy(rho: DensityGrid, k: int, s0: float) -> float:
    """
    Relative entropy of rho against Leb x tau_k: the integral of h log h - h + 1 over the grid.
    Outside the grid rho is taken equal to the reference measure.
    """
    _check_k(k)
    integrand = special.xlogy(rho.values, rho.values) - rho.values + 1.0
    return math.fsum((rho.weights(k, s0) * integrand).ravel())


def contraction_rate(x: float, k: int, s0: float, nodes: int = min_quadrature_nodes, d: int = 1) -> float:
    """Relative entropy of the constant density whose total mass is x."""
    if x < 0:
        return math.inf
    reference = DensityGrid.constant(1.0, d, s0, nodes)
    return relative_entropy(DensityGrid.constant(x / reference.mass(k, s0), d, s0, nodes), k, s0)


def two_level_contraction(x: float, k: int, s0: float, nodes: int = min_quadrature_nodes) -> float:
    """
    Minimize the relative entropy over densities taking one value on [0, 1/2) x marks and another on
    [1/2, 1) x marks, subject to total mass x. The minimizer is the constant density.
    """
    if x < 0:
        return math.inf
    ceiling = 2 * x / DensityGrid.constant(1.0, 1, s0, nodes).mass(k, s0)
    if ceiling == 0:
        return relative_entropy(DensityGrid.constant(0.0, 1, s0, nodes), k, s0)

    def objective(c1: float) -> float:
        c2 = max(ceiling - c1, 0.0)
        values = np.vstack([np.full(nodes, c1), np.full(nodes, c2)])
        edges = np.linspace(s0, s0 + mark_truncation, nodes + 1)
        return relative_entropy(DensityGrid(1, edges, values, x_cells=2), k, s0)

    result = optimize.minimize_scalar(objective, bounds=(0.0, ceiling), method="bounded",
                                      options={"xatol": 1e-10 * max(1.0, ceiling)})
    logger.debug("two-level contraction at x=%g: c1=%g", x, result.x)
    return float(result.fun)


@dataclass(frozen=True)
class RegimeReport:
    n_ladder: Tuple[float, ...]

    a_values: Tuple[float, ...]

    # a_n - log n - (k-1) log log n at every ladder point
    diagnostics: Tuple[float, ...]

    # change of the diagnostic per decade of n over the last two ladder points
    slope: float

    # "ldp", "boundary" or "m0"
    regime: str


def regime_diagnostic(n_ladder: Sequence[float], a_schedule: Sequence[float], k: int) -> RegimeReport:
    _check_k(k)
    if len(n_ladder) != len(a_schedule):
        raise DomainError(f"{len(n_ladder)} ladder points but {len(a_schedule)} a_n values")
    if len(n_ladder) < 2:
        raise DomainError("the regime diagnostic needs at least two ladder points")
    if any(n < 3 for n in n_ladder):
        raise DomainError("log log n needs n >= 3")
    if any(hi <= lo for lo, hi in zip(n_ladder[:-1], n_ladder[1:])):
        raise DomainError("the n-ladder must be increasing")

    diagnostics = tuple(a - math.log(n) - (k - 1) * math.log(math.log(n)) for n, a in zip(n_ladder, a_schedule))
    slope = (diagnostics[-1] - diagnostics[-2]) / (math.log10(n_ladder[-1]) - math.log10(n_ladder[-2]))
    if slope > boundary_slope_tolerance:
        regime = "m0"
    elif slope < -boundary_slope_tolerance:
        regime = "ldp"
    else:
        regime = "boundary"

    return RegimeReport(tuple(float(n) for n in n_ladder), tuple(float(a) for a in a_schedule), diagnostics,
                        slope, regime)


@dataclass(frozen=True, eq=False)
class MarkRegion:
    """The plateau function U(x, u) = height on [lower, upper) x [u_low, u_high], zero elsewhere."""
    lower: np.ndarray
    upper: np.ndarray
    u_low: float
    u_high: float
    height: float

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=np.float64).reshape(-1))
        if self.lower.shape != self.upper.shape or np.any(self.upper < self.lower):
            raise ParameterError("region box needs matching corners with upper >= lower")
        if self.u_high < self.u_low or self.height < 0:
            raise ParameterError("region needs u_high >= u_low and a non-negative height")

    @classmethod
    def plateau(cls, d: int, s0: float, width: float = 1.0, height: float = 1.0) -> "MarkRegion":
        """height on the whole cube times [s0, s0 + width]."""
        return cls(np.zeros(d), np.ones(d), s0, s0 + width, height)

    @classmethod
    def zero(cls, d: int) -> "MarkRegion":
        return cls(np.zeros(d), np.ones(d), 0.0, 0.0, 0.0)

    def evaluate(self, marked) -> float:
        """eta(U): the sum of U over the atoms of a MarkedPointSet."""
        if self.height == 0 or len(marked) == 0:
            return 0.0
        inside = np.all((marked.coords >= self.lower) & (marked.coords < self.upper), axis=1)
        inside &= (marked.marks >= self.u_low) & (marked.marks <= self.u_high)
        return self.height * int(np.count_nonzero(inside))

    def profile(self, u: float) -> float:
        return self.height if self.u_low <= u <= self.u_high else 0.0


def _box_overlap(first: MarkRegion, second: MarkRegion) -> float:
    side = np.clip(np.minimum(first.upper, second.upper) - np.maximum(first.lower, second.lower), 0.0, None)
    return float(np.prod(side))


def m0_functional_value(marked, U1: MarkRegion, U2: MarkRegion, eps1: float, eps2: float) -> float:
    """F(eta) = prod over l of (1 - exp(-(eta(U_l) - eps_l)_+)) on a single realization."""
    value = 1.0
    for region, eps in ((U1, eps1), (U2, eps2)):
        value *= -math.expm1(-max(region.evaluate(marked) - eps, 0.0))
    return value


def m0_limit_functional(U1: MarkRegion, U2: MarkRegion, eps1: float, eps2: float, k: int,
                        s0: float = 0.0) -> float:
    """
    Limit measure of the test functional F built from two plateau regions:
    the integral of prod_l (1 - exp(-(U_l(x,u) - eps_l)_+)) against Leb x tau_k.

    The spatial part is the overlap volume of the two boxes; the mark axis is integrated piecewise
    between the plateau breakpoints, truncated at s0 + mark_truncation.
    """
    _check_k(k)
    overlap = _box_overlap(U1, U2)
    if overlap == 0:
        return 0.0

    top = s0 + mark_truncation
    breaks = sorted({s0, top} | {min(max(u, s0), top) for u in (U1.u_low, U1.u_high, U2.u_low, U2.u_high)})
    def plateau_factor(u: float) -> float:
        factor = 1.0
        for region, eps in ((U1, eps1), (U2, eps2)):
            factor *= -math.expm1(-max(region.profile(u) - eps, 0.0))
        return factor

    pieces = []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi <= lo:
            continue
        # the plateaus are constant on the open piece; evaluate there to avoid the closed endpoints
        factor = plateau_factor(0.5 * (lo + hi))
        if factor == 0:
            continue
        pieces.append(factor * tau_mass(k, s0, lo, hi))

    return overlap * math.fsum(pieces)
