import math

import numpy as np

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from src.errors import InvalidCoordinateError, DimensionMismatchError, ParameterError


@dataclass(frozen=True)
class TorusPoint:
    """A location in [0,1)^d; build it through canonicalize() so the coordinates are wrapped."""
    coords: Tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=np.float64)


def check_dimension(d: int) -> int:
    if int(d) != d or d < 1:
        raise ParameterError(f"dimension must be a positive integer, got {d}")
    return int(d)


@dataclass(frozen=True, eq=False)
class PointSet:
    """
    An unmarked finite configuration on the torus, stored as an (N, d) coordinate array.
    Row order is the point index used by the spatial index and the marked processes.
    """
    dim: int
    coords: np.ndarray

    def __post_init__(self):
        check_dimension(self.dim)
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, self.dim)
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def points(self) -> List[TorusPoint]:
        return [TorusPoint(tuple(float(c) for c in row)) for row in self.coords]

    @classmethod
    def empty(cls, d: int) -> "PointSet":
        return cls(d, np.empty((0, d)))

    @classmethod
    def from_points(cls, points: Sequence[TorusPoint], d: int = None) -> "PointSet":
        if d is None:
            if not points:
                raise DimensionMismatchError("cannot infer the dimension of an empty point list")
            d = points[0].dim
        if any(p.dim != d for p in points):
            raise DimensionMismatchError(f"all points must have dimension {d}")
        return cls(d, np.array([p.coords for p in points], dtype=np.float64).reshape(-1, d))


def canonicalize_array(raw) -> np.ndarray:
    """
    Reduce an array of coordinates modulo 1 into [0,1).

    Args:
        raw: array-like of shape (..., d)

    Returns:
        a float64 array of the same shape with every entry in [0,1)

    """
    arr = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidCoordinateError("coordinates must be finite")

    wrapped = np.mod(arr, 1.0)
    # np.mod(-tiny, 1.0) rounds up to exactly 1.0
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def canonicalize(raw: Sequence[float]) -> TorusPoint:
    wrapped = canonicalize_array(np.atleast_1d(np.asarray(raw, dtype=np.float64)))
    if wrapped.ndim != 1 or wrapped.size == 0:
        raise InvalidCoordinateError("a point needs a non-empty flat list of coordinates")
    return TorusPoint(tuple(float(c) for c in wrapped))


def squared_norm(deltas: np.ndarray) -> np.ndarray:
    """Sum of squares over the last axis, accumulated axis by axis so every caller rounds identically."""
    total = deltas[..., 0] * deltas[..., 0]
    for axis in range(1, deltas.shape[-1]):
        total = total + deltas[..., axis] * deltas[..., axis]
    return total


def wrapped_deltas(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-axis toroidal separations min(|x_i - y_i|, 1 - |x_i - y_i|), broadcasting x against y."""
    delta = np.abs(x - y)
    return np.minimum(delta, 1.0 - delta)


def torus_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_norm(wrapped_deltas(x, y)))


def euclidean_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_norm(np.abs(x - y)))


def torus_distance(x: TorusPoint, y: TorusPoint) -> float:
    if x.dim != y.dim:
        raise DimensionMismatchError(f"points of dimension {x.dim} and {y.dim}")
    return float(torus_distances(x.as_array(), y.as_array()))


def ball_volume_coeff(d: int) -> float:
    """theta_d, the volume of the unit ball in R^d."""
    d = check_dimension(d)
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def ball_volume(r: float, d: int) -> float:
    if r < 0:
        raise ParameterError(f"radius must be non-negative, got {r}")
    if math.isinf(r):
        return math.inf
    return ball_volume_coeff(d) * r ** d
