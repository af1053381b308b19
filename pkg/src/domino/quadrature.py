"""Quadrature rules: composite Gauss-Legendre panels and time-simplex grids."""
from __future__ import annotations

import functools
import itertools
import math

import numpy as np
from scipy.stats import qmc


@functools.lru_cache(maxsize=None)
def gauss_legendre_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n``-point Gauss-Legendre rule on (0, 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_rule(breaks: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite rule over consecutive breakpoints, batched over leading axes.

    ``breaks`` has shape (..., P + 1) and must be sorted along its last axis;
    zero-width panels get zero weight.  Returns nodes and weights of shape
    (..., P * n).
    """
    x, w = gauss_legendre_01(n)
    lo = breaks[..., :-1, None]
    width = np.diff(breaks, axis=-1)[..., None]
    nodes = lo + width * x
    weights = width * w
    shape = breaks.shape[:-1] + (-1,)
    return nodes.reshape(shape), weights.reshape(shape)


def _warp(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # u = sin^2(pi v / 2): square-root endpoint behaviour becomes smooth in v
    s = np.sin(0.5 * np.pi * v)
    return s * s, 0.5 * np.pi * np.sin(np.pi * v)


def simplex_points(unit: np.ndarray, horizon: float) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Map points of the unit cube (T, k) onto ``u_1 + ... + u_k <= horizon``.

    Returns the per-stage times, the Jacobian and the residual time
    ``horizon - sum(u)``, each of shape (T,).
    """
    t_count, k = unit.shape
    remaining = np.full(t_count, float(horizon))
    jac = np.ones(t_count)
    times = []
    for j in range(k):
        frac, dfrac = _warp(unit[:, j])
        u = remaining * frac
        jac = jac * remaining * dfrac
        times.append(u)
        remaining = remaining - u
    return times, jac, np.maximum(remaining, 0.0)


def tensor_unit_grid(k: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre grid on (0, 1)^k with weights."""
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = gauss_legendre_01(n)
    pts = np.array(list(itertools.product(x, repeat=k)))
    wts = np.array([math.prod(c) for c in itertools.product(w, repeat=k)])
    return pts, wts


def sobol_unit_points(k: int, n_points: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Scrambled Sobol points (equal weights), deterministic for a given seed."""
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    m = max(1, math.ceil(math.log2(n_points)))
    pts = qmc.Sobol(d=k, scramble=True, seed=seed).random_base2(m)
    return pts, np.full(len(pts), 1.0 / len(pts))
