"""The regularized ansatz field f_{n,t} with -Lap f_{n,t} = p_t * (mu_n - 1).

Writing the sample's Fourier coefficients mu_hat(k) = (1/n) sum_i exp(-2 pi i k.X_i),
the field is f_hat(k) = mu_hat(k) w_k, i.e. f(y) = (1/n) sum_i q_t(y - X_i).

Gradients here are the true gradient of f, grad f(y) = -(1/n) sum_i grad q_t(X_i - y);
the trajectory identity d/ds f(X_s) = X_s' . grad f(X_s) pins the orientation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from .heat import DEFAULT_TAIL_TOL, FOUR_PI2, HeatEvaluator, heat_evaluator, kmax_for, q_grad, q_value
from .torus import InvalidInput, SampleSet, _as_points, displacement

DEFAULT_GRID_K = 256


class InvalidConfiguration(ValueError):
    pass


def sample_fourier(sample: SampleSet, kmax: int) -> np.ndarray:
    """mu_hat(k) on the box |k_i| <= kmax, indexed like HeatEvaluator.weights."""
    k = np.arange(-kmax, kmax + 1, dtype=np.float64)
    e1 = np.exp(-2j * np.pi * sample.points[:, 0:1] * k)
    e2 = np.exp(-2j * np.pi * sample.points[:, 1:2] * k)
    return (e1.T @ e2) / sample.n


@dataclass(frozen=True)
class AnsatzField:
    sample: SampleSet
    t: float
    evaluator: HeatEvaluator = field(repr=False)
    grid_K: int = DEFAULT_GRID_K

    @cached_property
    def grid(self) -> "GridField":
        return build_grid_field(self.sample, self.t, self.grid_K, self.evaluator.cutoff.tail_tolerance)

    def grad(self, y, method: str = "grid") -> np.ndarray:
        if method == "grid":
            return grad_f_grid(self.grid, y)
        if method == "direct":
            return grad_f_direct(self, y)
        raise InvalidInput(f"unknown method {method!r}")


def ansatz_field(sample: SampleSet, t: float, tail_tolerance: float = DEFAULT_TAIL_TOL,
                 grid_K: int = DEFAULT_GRID_K, allow_small_t: bool = False) -> AnsatzField:
    if not t > 0:
        raise InvalidInput("t must be positive")
    # floating slack so that t = 1/n itself is accepted
    if not allow_small_t and t * sample.n < 1.0 - 1e-12:
        raise InvalidConfiguration(f"t={t} is below r_n^2 = 1/{sample.n}")
    return AnsatzField(sample, float(t), heat_evaluator(t, tail_tolerance), grid_K)


def _pair_sum(field: AnsatzField, y: np.ndarray, fn) -> np.ndarray:
    flat = y.reshape(-1, 2)
    X = field.sample.points
    # bound the number of (query, atom) pairs handled at once
    step = max(1, 200_000 // X.shape[0])
    parts = []
    for start in range(0, flat.shape[0], step):
        q = flat[start:start + step]
        d = displacement(q[:, None, :], X[None, :, :])
        vals = fn(field.evaluator, d.reshape(-1, 2))
        parts.append(vals.reshape(q.shape[0], X.shape[0], *vals.shape[1:]).mean(axis=1))
    return np.concatenate(parts, axis=0)


def grad_f_direct(field: AnsatzField, y) -> np.ndarray:
    """grad f_{n,t}(y) by summing grad q_t over the atoms."""
    y = _as_points(y)
    return -_pair_sum(field, y, q_grad).reshape(y.shape)


def f_value(field: AnsatzField, y):
    """(1/n) sum_i q_t(X_i - y); q_t is even so the orientation is immaterial."""
    y = _as_points(y)
    out = _pair_sum(field, y, q_value).reshape(y.shape[:-1])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GridField:
    """Field on the K x K node grid (i/K, j/K); coefficients in numpy FFT order."""

    K: int
    t: float
    fourier_coefficients: np.ndarray = field(repr=False)

    @cached_property
    def values(self) -> np.ndarray:
        return np.real(np.fft.ifft2(self.fourier_coefficients)) * self.K**2

    @cached_property
    def gradient_values(self) -> np.ndarray:
        k = np.fft.fftfreq(self.K, d=1.0 / self.K)
        gx = np.fft.ifft2(2j * np.pi * k[:, None] * self.fourier_coefficients)
        gy = np.fft.ifft2(2j * np.pi * k[None, :] * self.fourier_coefficients)
        return np.stack([np.real(gx), np.real(gy)]) * self.K**2

    @cached_property
    def _spline_coefficients(self) -> np.ndarray:
        return np.stack([ndimage.spline_filter(g, order=3, mode="grid-wrap") for g in self.gradient_values])


def build_grid_field(sample: SampleSet, t: float, K: int = DEFAULT_GRID_K,
                     tail_tolerance: float = DEFAULT_TAIL_TOL) -> GridField:
    if K < 2 or K & (K - 1):
        raise InvalidConfiguration(f"K={K} must be a power of two")
    kmax = kmax_for(t, tail_tolerance)
    if K < 2 * kmax + 1:
        raise InvalidConfiguration(f"K={K} cannot resolve modes up to kmax={kmax}")
    ev = heat_evaluator(t, tail_tolerance)
    fk = sample_fourier(sample, kmax) * ev.weights
    coef = np.zeros((K, K), dtype=complex)
    idx = np.arange(-kmax, kmax + 1) % K
    coef[np.ix_(idx, idx)] = fk
    coef.setflags(write=False)
    return GridField(K, float(t), coef)


def grad_f_grid(field: GridField, y) -> np.ndarray:
    """Cubic-spline interpolation of the spectrally differentiated field."""
    y = _as_points(y)
    flat = y.reshape(-1, 2)
    coords = (np.mod(flat, 1.0) * field.K).T
    out = np.stack([
        ndimage.map_coordinates(c, coords, order=3, mode="grid-wrap", prefilter=False)
        for c in field._spline_coefficients
    ], axis=1)
    return out.reshape(y.shape)


def field_dot_integral(sample: SampleSet, s: float, t: float,
                       tail_tolerance: float = DEFAULT_TAIL_TOL) -> float:
    """int_T grad f_{n,s} . grad f_{n,t} dy = sum_k |mu_hat(k)|^2 exp(-4pi^2|k|^2(s+t)) / (4pi^2|k|^2)."""
    if not (s > 0 and t > 0):
        raise InvalidInput("s and t must be positive")
    ev = heat_evaluator(s + t, tail_tolerance)
    mu = sample_fourier(sample, ev.kmax)
    return float(math.fsum((np.abs(mu) ** 2 * ev.weights).ravel()))


def grid_dot_integral(a: GridField, b: GridField) -> float:
    """Grid-quadrature mean of grad f_a . grad f_b (exact for band-limited fields)."""
    if a.K != b.K:
        raise InvalidInput("grid resolutions differ")
    return float(np.mean(np.sum(a.gradient_values * b.gradient_values, axis=0)))


def spectral_laplacian(field: GridField) -> np.ndarray:
    """Coefficients of -Lap f, to compare with those of p_t * (mu_n - 1)."""
    k = np.fft.fftfreq(field.K, d=1.0 / field.K)
    return FOUR_PI2 * (k[:, None] ** 2 + k[None, :] ** 2) * field.fourier_coefficients
