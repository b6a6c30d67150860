"""Straight-line trajectories between coupled points and functionals along them.

Convention: X_0 is the Lebesgue-side point y and X_1 is the atom x, so the
velocity is the constant periodic displacement d = x - y and grad f(X_1) is
evaluated where mu_n lives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ansatz import AnsatzField, f_value
from .torus import InvalidInput, SampleSet, _as_points, displacement, wrap
from .transport import TransportResult, grid_centers_flat

DEFAULT_QUAD_NODES = 32


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise InvalidInput("quadrature weights must sum to 1")
        if np.any(self.weights <= 0):
            raise InvalidInput("quadrature weights must be positive")
        if np.any(np.diff(self.nodes) <= 0):
            raise InvalidInput("quadrature nodes must be strictly increasing")
        if self.nodes.min() < 0 or self.nodes.max() > 1:
            raise InvalidInput("quadrature nodes must lie in [0, 1]")


def gauss_legendre(nodes: int = DEFAULT_QUAD_NODES) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(nodes)
    return QuadratureRule((x + 1) / 2, w / 2)


def point_rule(s: float) -> QuadratureRule:
    return QuadratureRule(np.array([float(s)]), np.array([1.0]))


def trajectory_point(x, y, s) -> np.ndarray:
    """X_s = y + s * displacement(y, x), wrapped onto the torus."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise InvalidInput("s must lie in [0, 1]")
    d = displacement(y, x)
    return wrap(_as_points(y) + s_arr[..., None] * d)


def coupling_pairs(result: TransportResult, sample: SampleSet, K: int):
    """(atoms, cell centers, masses) for every coupling entry."""
    cp = result.coupling
    if cp.n_targets != K * K:
        raise InvalidInput(f"coupling targets {cp.n_targets} do not match a {K}x{K} grid")
    return sample.points[cp.sources], grid_centers_flat(cp.targets, K), cp.mass


def _grads_along(field: AnsatzField, x, y, quad: QuadratureRule, method: str):
    """grad f at X_s for every pair and node: shape (nodes, pairs, 2)."""
    d = displacement(y, x)
    pts = wrap(y[None, :, :] + quad.nodes[:, None, None] * d[None, :, :])
    return d, field.grad(pts.reshape(-1, 2), method).reshape(pts.shape)


def _weighted(mass, per_pair) -> float:
    return float(math.fsum(mass * per_pair))


def endpoint_defect_pairs(field: AnsatzField, x, y, mass, method: str = "grid") -> float:
    """sum mass |d - grad f(x)|^2 with d = displacement(y, x)."""
    x, y = _as_points(x), _as_points(y)
    r = displacement(y, x) - field.grad(x, method)
    return _weighted(mass, np.sum(r * r, axis=-1))


def defect_along_pairs(field, x, y, mass, quad, method="grid") -> float:
    d, g = _grads_along(field, _as_points(x), _as_points(y), quad, method)
    r = d[None] - g
    return _weighted(mass, quad.weights @ np.sum(r * r, axis=-1))


def energy_along_pairs(field, x, y, mass, quad, method="grid") -> float:
    _, g = _grads_along(field, _as_points(x), _as_points(y), quad, method)
    return _weighted(mass, quad.weights @ np.sum(g * g, axis=-1))


def endpoint_difference_pairs(field, x, y, mass, quad, method="grid") -> float:
    """sum mass int_0^1 |grad f(X_1) - grad f(X_s)|^2 ds."""
    x = _as_points(x)
    _, g = _grads_along(field, x, _as_points(y), quad, method)
    g1 = field.grad(x, method)
    r = g1[None] - g
    return _weighted(mass, quad.weights @ np.sum(r * r, axis=-1))


def defect_split_pieces(field, x, y, mass, quad, method="grid") -> tuple[float, float, float]:
    """Three pieces bounding the trajectory defect through X_1 and X_0.

    |d - g(X_s)| <= |d - g(X_1)| + |g(X_1) - g(X_0)| + |g(X_0) - g(X_s)|.
    """
    x, y = _as_points(x), _as_points(y)
    d, g = _grads_along(field, x, y, quad, method)
    g1 = field.grad(x, method)
    g0 = field.grad(y, method)
    a = np.sum((d - g1) ** 2, axis=-1)
    b = np.sum((g1 - g0) ** 2, axis=-1)
    c = quad.weights @ np.sum((g0[None] - g) ** 2, axis=-1)
    return _weighted(mass, a), _weighted(mass, b), _weighted(mass, c)


def defect_endpoint(field: AnsatzField, result: TransportResult, sample: SampleSet, K: int,
                    method: str = "grid") -> float:
    x, y, m = coupling_pairs(result, sample, K)
    return endpoint_defect_pairs(field, x, y, m, method)


def defect_along(field, result, sample, K, quad=None, method="grid") -> float:
    x, y, m = coupling_pairs(result, sample, K)
    return defect_along_pairs(field, x, y, m, quad or gauss_legendre(), method)


def energy_along(field, result, sample, K, quad=None, method="grid") -> float:
    x, y, m = coupling_pairs(result, sample, K)
    return energy_along_pairs(field, x, y, m, quad or gauss_legendre(), method)


def endpoint_difference(field, result, sample, K, quad=None, method="grid") -> float:
    x, y, m = coupling_pairs(result, sample, K)
    return endpoint_difference_pairs(field, x, y, m, quad or gauss_legendre(), method)


def gradient_flow_identity_check(field: AnsatzField, x, y, quad: QuadratureRule | None = None) -> np.ndarray | float:
    """|int_0^1 d . grad f(X_s) ds - (f(x) - f(y))|, evaluated with exact direct sums."""
    quad = quad or gauss_legendre(64)
    x, y = _as_points(x), _as_points(y)
    xs, ys = np.atleast_2d(x), np.atleast_2d(y)
    d, g = _grads_along(field, xs, ys, quad, "direct")
    line = quad.weights @ np.sum(d[None] * g, axis=-1)
    out = np.abs(line - (f_value(field, xs) - f_value(field, ys)))
    return float(out[0]) if x.ndim == 1 else out
