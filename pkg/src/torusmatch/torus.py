"""Geometry of the flat torus (R/Z)^2, uniform sampling and grids.

Points are stored as float64 arrays whose last axis has length 2, so every
function here accepts a single point ``(u, v)`` or a stack of shape ``(N, 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

UINT64_MAX = 2**64 - 1


class InvalidInput(ValueError):
    """Raised when an argument violates a documented precondition."""


class TorusPoint(NamedTuple):
    u: float
    v: float

    @classmethod
    def of(cls, u, v) -> "TorusPoint":
        w = wrap((u, v))
        return cls(float(w[0]), float(w[1]))


class Displacement(NamedTuple):
    du: float
    dv: float


def _as_points(raw) -> np.ndarray:
    a = np.asarray(raw, dtype=np.float64)
    if a.shape[-1:] != (2,):
        raise InvalidInput(f"expected trailing dimension 2, got shape {a.shape}")
    return a


def wrap(raw) -> np.ndarray:
    """Reduce coordinates modulo 1 into [0, 1)."""
    a = _as_points(raw)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("coordinates must be finite")
    w = np.mod(a, 1.0)
    # mod of a tiny negative number rounds up to exactly 1.0
    return np.where(w >= 1.0, 0.0, w)


def _reduce_half(d: np.ndarray) -> np.ndarray:
    r = d - np.floor(d + 0.5)
    r = np.where(r >= 0.5, r - 1.0, r)
    return np.where(r < -0.5, r + 1.0, r)


def displacement(a, b) -> np.ndarray:
    """Representative of ``b - a`` in [-1/2, 1/2)^2 (ties go to -1/2)."""
    return _reduce_half(_as_points(b) - _as_points(a))


def dist2(a, b) -> np.ndarray | float:
    d = displacement(a, b)
    out = np.sum(d * d, axis=-1)
    return float(out) if out.ndim == 0 else out


def pairwise_dist2(a, b) -> np.ndarray:
    """Matrix of squared periodic distances, shape ``(len(a), len(b))``."""
    a = _as_points(a)
    b = _as_points(b)
    out = np.zeros((a.shape[0], b.shape[0]))
    for c in range(2):
        d = np.abs(b[None, :, c] - a[:, None, c])
        # wrapped coordinates differ by less than 1, so the periodic gap is min(d, 1 - d)
        np.minimum(d, 1.0 - d, out=d)
        d *= d
        out += d
    return out


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= UINT64_MAX:
        raise InvalidInput(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    """Counter-based stream that depends only on ``(seed, replicate_index)``."""
    if replicate_index < 0:
        raise InvalidInput("replicate_index must be nonnegative")
    ss = np.random.SeedSequence(_check_seed(seed), spawn_key=(int(replicate_index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray = field(repr=False)
    n: int
    seed: int
    replicate_index: int

    def __post_init__(self):
        if self.points.shape != (self.n, 2):
            raise InvalidInput(f"points shape {self.points.shape} does not match n={self.n}")

    @classmethod
    def from_points(cls, points, seed: int = 0, replicate_index: int = 0) -> "SampleSet":
        p = wrap(np.atleast_2d(points))
        return cls(p, p.shape[0], seed, replicate_index)

    def shifted(self, shift) -> "SampleSet":
        return SampleSet(wrap(self.points + np.asarray(shift, float)), self.n, self.seed, self.replicate_index)


def sample_uniform(n: int, seed: int, replicate_index: int = 0) -> SampleSet:
    if n < 1:
        raise InvalidInput("n must be >= 1")
    rng = replicate_rng(seed, replicate_index)
    return SampleSet(rng.random((n, 2)), int(n), int(seed), int(replicate_index))


def grid_centers(K: int) -> np.ndarray:
    """Centers ((i+1/2)/K, (j+1/2)/K) in row-major order (i outer)."""
    if K < 1:
        raise InvalidInput("K must be >= 1")
    c = (np.arange(K) + 0.5) / K
    uu, vv = np.meshgrid(c, c, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)
