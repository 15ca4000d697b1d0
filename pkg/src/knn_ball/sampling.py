import numpy as np

from collections import Counter
from dataclasses import dataclass
from typing import Union

from NeighborSearch.torus_geometry import PointSet, check_dimension
from src.errors import DimensionMismatchError, ParameterError
from src.knn_ball.analytic import alpha_k
from src.knn_ball.nnball_process import MarkedPointSet
from src.utils import stream_shift


class RngStream:
    """
    A counter-based random stream keyed by (seed, stream index). Two streams built from the same pair
    produce the same sequence; distinct indices are statistically independent.
    """

    def __init__(self, seed: int, stream_index: int = 0):
        self.seed = int(seed)
        self.stream_index = int(stream_index)

        seed_sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_index,))
        self.generator = np.random.Generator(np.random.Philox(seed_sequence))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_index={self.stream_index})"


def replication_stream(seed: int, ladder_index: int, replication: int) -> RngStream:
    return RngStream(seed, (ladder_index << stream_shift) | replication)


Rng = Union[RngStream, np.random.Generator]


def _generator(rng: Rng) -> np.random.Generator:
    return rng.generator if isinstance(rng, RngStream) else rng


def sample_poisson_process(intensity: float, d: int, rng: Rng) -> PointSet:
    """Homogeneous Poisson process on the torus: Poisson(intensity) many i.i.d. uniform points."""
    if not intensity > 0:
        raise ParameterError(f"intensity must be positive, got {intensity}")
    check_dimension(d)
    gen = _generator(rng)
    count = gen.poisson(intensity)
    return PointSet(d, gen.random((count, d)))


def sample_binomial_process(count: int, d: int, rng: Rng) -> PointSet:
    if count < 0:
        raise ParameterError(f"count must be non-negative, got {count}")
    check_dimension(d)
    return PointSet(d, _generator(rng).random((int(count), d)))


@dataclass(frozen=True)
class CoupledTriple:
    # base minus the deleted atoms
    thinned: PointSet

    base: PointSet

    # base plus the extra atoms
    augmented: PointSet

    deleted: PointSet

    extra: PointSet


def _stack(first: PointSet, second: PointSet) -> PointSet:
    return PointSet(first.dim, np.concatenate([first.coords, second.coords], axis=0))


def sample_coupled(base: PointSet, eta: float, rng: Rng, intensity: float) -> CoupledTriple:
    """
    Thin and augment a Poisson sample of the given intensity.

    Args:
        base: the Poisson configuration
        eta: deletion probability of every base atom, and relative intensity of the extra atoms
        rng: random stream
        intensity: the intensity base was sampled at

    Returns:
        the CoupledTriple; thinned has intensity (1 - eta) * intensity and augmented (1 + eta) * intensity

    """
    if not 0 < eta <= 1:
        raise ParameterError(f"eta must lie in (0, 1], got {eta}")
    gen = _generator(rng)
    deleted_mask = gen.random(len(base)) < eta
    extra = sample_poisson_process(intensity * eta, base.dim, gen)

    return CoupledTriple(thinned=PointSet(base.dim, base.coords[~deleted_mask]),
                         base=base,
                         augmented=_stack(base, extra),
                         deleted=PointSet(base.dim, base.coords[deleted_mask]),
                         extra=extra)


def draw_coupled_binomial(triple: CoupledTriple, n: int, rng: Rng) -> PointSet:
    """
    n i.i.d. uniform points built from the atoms of the triple: every thinned atom first, then a uniform
    fill from augmented minus thinned. Too many thinned atoms gives a uniform n-subset of them; too few
    augmented atoms are topped up with fresh uniform points.
    """
    if n < 0:
        raise ParameterError(f"n must be non-negative, got {n}")
    gen = _generator(rng)
    thinned = triple.thinned.coords
    if len(thinned) > n:
        return PointSet(triple.base.dim, thinned[np.sort(gen.choice(len(thinned), n, replace=False))])

    rest = np.concatenate([triple.deleted.coords, triple.extra.coords], axis=0)
    if len(thinned) + len(rest) < n:
        fresh = gen.random((n - len(thinned) - len(rest), triple.base.dim))
        return PointSet(triple.base.dim, np.concatenate([thinned, rest, fresh], axis=0))

    fill = rest[np.sort(gen.choice(len(rest), n - len(thinned), replace=False))]
    return PointSet(triple.base.dim, np.concatenate([thinned, fill], axis=0))


def _multiset(ps: PointSet) -> Counter:
    return Counter(map(tuple, ps.coords.tolist()))


def sandwich_holds(triple: CoupledTriple, binom: PointSet) -> bool:
    """thinned <= binom <= augmented as multisets of exact coordinates."""
    if binom.dim != triple.base.dim:
        raise DimensionMismatchError(f"binomial sample of dimension {binom.dim} against {triple.base.dim}")
    inner, middle, outer = _multiset(triple.thinned), _multiset(binom), _multiset(triple.augmented)
    return not (inner - middle) and not (middle - outer)


def sample_limit_process(b: float, k: int, s0: float, rng: Rng, d: int = 1) -> MarkedPointSet:
    """
    The limiting marked Poisson process: Poisson(b * alpha_k) atoms, uniform locations, marks s0 + Exp(1).
    """
    if not b > 0:
        raise ParameterError(f"b must be positive, got {b}")
    check_dimension(d)
    gen = _generator(rng)
    count = gen.poisson(b * alpha_k(k, s0))
    coords = gen.random((count, d))
    return MarkedPointSet(d, coords, s0 + gen.exponential(1.0, count))
