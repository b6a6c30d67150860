"""Heat kernel, regularized Green's function q_t and their spectral closed forms.

On the unit torus the heat kernel has the two classical representations

    p_t(x) = sum_k exp(-4 pi^2 |k|^2 t) cos(2 pi k.x)              (Fourier)
           = sum_m (4 pi t)^-1 exp(-|x + m|^2 / (4t))              (images)

and q_t(y) = int_t^inf (p_s(y) - 1) ds has Fourier weights
w_k = exp(-4 pi^2 |k|^2 t) / (4 pi^2 |k|^2) for k != 0, so that -Lap q_t = p_t - 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .torus import InvalidInput, _as_points, _reduce_half

FOUR_PI2 = 4.0 * math.pi**2
W_PEAK = 1.0 / FOUR_PI2
CROSSOVER_T = 1.0 / (2.0 * math.pi)
IMAGE_RADIUS = 4
DEFAULT_TAIL_TOL = 1e-12
_CHUNK = 4096


def kmax_for(t: float, tail_tolerance: float = DEFAULT_TAIL_TOL, peak: float = W_PEAK) -> int:
    """Mode cutoff so that the tail of sum_{|k|>kmax} peak*exp(-4pi^2|k|^2 t) stays below tolerance."""
    if t <= 0:
        raise InvalidInput("t must be positive")
    if tail_tolerance <= 0:
        raise InvalidInput("tail_tolerance must be positive")
    ratio = math.log(peak / tail_tolerance)
    return int(math.ceil(math.sqrt(max(ratio, 0.0) / (FOUR_PI2 * t)))) + 2


@dataclass(frozen=True)
class SpectralCutoff:
    tail_tolerance: float
    kmax: int


def _freqs(kmax: int) -> np.ndarray:
    return np.arange(-kmax, kmax + 1, dtype=np.float64)


@dataclass(frozen=True)
class HeatEvaluator:
    """Truncated Fourier representation of q_t on the square box |k_i| <= kmax.

    ``weights[a, b]`` is w_k for k = (a - kmax, b - kmax); the zero mode is 0.
    """

    t: float
    cutoff: SpectralCutoff
    weights: np.ndarray = field(repr=False)

    @property
    def kmax(self) -> int:
        return self.cutoff.kmax

    @property
    def freqs(self) -> np.ndarray:
        return _freqs(self.kmax)

    def q_value(self, y) -> np.ndarray:
        return q_value(self, y)

    def q_grad(self, y) -> np.ndarray:
        return q_grad(self, y)


def heat_evaluator(t: float, tail_tolerance: float = DEFAULT_TAIL_TOL) -> HeatEvaluator:
    kmax = kmax_for(t, tail_tolerance)
    k = _freqs(kmax)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.exp(-FOUR_PI2 * k2 * t) / (FOUR_PI2 * k2)
    w[kmax, kmax] = 0.0
    w.setflags(write=False)
    return HeatEvaluator(float(t), SpectralCutoff(tail_tolerance, kmax), w)


def _chunks(y: np.ndarray):
    for start in range(0, y.shape[0], _CHUNK):
        yield slice(start, start + _CHUNK)


def q_value(ev: HeatEvaluator, y) -> np.ndarray | float:
    """q_t(y) = sum_k w_k cos(2 pi k.y).

    w_k is even in each coordinate separately, so the sine-sine part of
    cos(a + b) cancels and the sum factorizes as C1 @ W @ C2.
    """
    y = _as_points(y)
    flat = y.reshape(-1, 2)
    k = ev.freqs
    out = np.empty(flat.shape[0])
    for sl in _chunks(flat):
        c1 = np.cos(2 * np.pi * flat[sl, 0:1] * k)
        c2 = np.cos(2 * np.pi * flat[sl, 1:2] * k)
        out[sl] = np.sum((c1 @ ev.weights) * c2, axis=1)
    out = out.reshape(y.shape[:-1])
    return float(out) if out.ndim == 0 else out


def q_grad(ev: HeatEvaluator, y) -> np.ndarray:
    """Gradient of q_t: -sum_k w_k 2 pi k sin(2 pi k.y)."""
    y = _as_points(y)
    flat = y.reshape(-1, 2)
    k = ev.freqs
    tk = 2 * np.pi * k
    out = np.empty_like(flat)
    for sl in _chunks(flat):
        a1 = 2 * np.pi * flat[sl, 0:1] * k
        a2 = 2 * np.pi * flat[sl, 1:2] * k
        c1, s1 = np.cos(a1), np.sin(a1)
        c2, s2 = np.cos(a2), np.sin(a2)
        out[sl, 0] = -np.sum(((s1 * tk) @ ev.weights) * c2, axis=1)
        out[sl, 1] = -np.sum((c1 @ ev.weights) * (s2 * tk), axis=1)
    return out.reshape(y.shape)


def _heat_fourier(t: float, x: np.ndarray, tol: float) -> np.ndarray:
    kmax = kmax_for(t, tol, peak=1.0)
    k = _freqs(kmax)
    g = np.exp(-FOUR_PI2 * k**2 * t)
    c1 = np.cos(2 * np.pi * x[:, 0:1] * k) * g
    c2 = np.cos(2 * np.pi * x[:, 1:2] * k) * g
    # the 1D theta factors multiply: sum_k g(k1) g(k2) cos cos
    return np.sum(c1, axis=1) * np.sum(c2, axis=1)


def _heat_images(t: float, x: np.ndarray, radius: int = IMAGE_RADIUS) -> np.ndarray:
    x = _reduce_half(x)
    m = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-((x[:, 0:1] + m) ** 2) / (4 * t)).sum(axis=1)
    g2 = np.exp(-((x[:, 1:2] + m) ** 2) / (4 * t)).sum(axis=1)
    return g1 * g2 / (4 * np.pi * t)


def heat_kernel(t: float, x, method: str = "auto", tail_tolerance: float = 1e-16) -> np.ndarray | float:
    """p_t(x) by dual summation: Fourier for t >= 1/(2 pi), Gaussian images below."""
    if not t > 0:
        raise InvalidInput("t must be positive")
    x = _as_points(x)
    flat = x.reshape(-1, 2)
    if method == "auto":
        method = "fourier" if t >= CROSSOVER_T else "images"
    if method == "fourier":
        out = _heat_fourier(t, flat, tail_tolerance)
    elif method == "images":
        out = _heat_images(t, flat)
    else:
        raise InvalidInput(f"unknown method {method!r}")
    out = out.reshape(x.shape[:-1])
    return float(out) if out.ndim == 0 else out


def covariance_closed_form(t: float, y, tail_tolerance: float = DEFAULT_TAIL_TOL):
    """2 (q_{2t}(0) - q_{2t}(y)): exact n E|grad f_{n,t}(0) - grad f_{n,t}(y)|^2."""
    if not t > 0:
        raise InvalidInput("t must be positive")
    ev = heat_evaluator(2 * t, tail_tolerance)
    out = 2.0 * (ev.q_value((0.0, 0.0)) - ev.q_value(y))
    return np.maximum(out, 0.0) if np.ndim(out) else max(float(out), 0.0)


def field_energy_closed_form(t: float, tail_tolerance: float = DEFAULT_TAIL_TOL) -> float:
    """q_{2t}(0): exact n E int_T |grad f_{n,t}|^2 dy."""
    if not t > 0:
        raise InvalidInput("t must be positive")
    return float(np.sum(heat_evaluator(2 * t, tail_tolerance).weights))


def sup_grad_q(t: float, r: float, n_radii: int = 64, n_angles: int = 64,
               tail_tolerance: float = DEFAULT_TAIL_TOL) -> float:
    """max |grad q_{2t}| over a polar sampling of the ball of radius r at 0."""
    if not t > 0:
        raise InvalidInput("t must be positive")
    if not 0 < r <= 0.5:
        raise InvalidInput("r must lie in (0, 1/2]")
    ev = heat_evaluator(2 * t, tail_tolerance)
    rad = np.linspace(0.0, r, n_radii + 1)[1:]
    ang = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    pts = np.stack([np.outer(rad, np.cos(ang)).ravel(), np.outer(rad, np.sin(ang)).ravel()], axis=1)
    g = q_grad(ev, pts)
    return float(np.max(np.hypot(g[:, 0], g[:, 1])))
