"""First-passage analytics for a Brownian motion with drift killed at zero.

The reduced process is ``Y_t = d + m t + s W_t`` started at ``d > 0`` and
absorbed at 0.  Everything here is closed form in normal CDFs, with the image
term handled in log space so strongly negative drifts do not overflow.

The ``*_arr`` functions are the vectorised numerical layer used by the
quadrature engine and the simulators; the scalar functions taking a
:class:`PassageParams` validate their inputs and delegate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# rejection rounds before stragglers fall through to exact CDF inversion
REJECTION_ROUNDS = 32
# smallest survival probability we agree to condition on
MIN_CONDITIONING = 1e-300


class DegenerateConditioning(ValueError):
    """Survival probability underflowed, the conditional law is undefined."""


@dataclass(frozen=True)
class PassageParams:
    d: float
    m: float
    s: float

    def __post_init__(self) -> None:
        if not self.d > 0:
            raise ValueError(f"distance must be positive, got {self.d}")
        if not self.s > 0:
            raise ValueError(f"volatility must be positive, got {self.s}")


def _log_ndtr_diff(lo, hi):
    """log(Phi(hi) - Phi(lo)) for lo <= hi, accurate in both tails."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    out = np.full(lo.shape, -np.inf)
    upper = lo >= 0
    # in the upper tail reflect so both arguments sit in the lower tail
    a = np.where(upper, -hi, lo)
    b = np.where(upper, -lo, hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        lb = log_ndtr(b)
        la = log_ndtr(a)
        tail = b <= 0
        good = b > a
        out = np.where(good & tail, lb + np.log1p(-np.exp(la - lb)), out)
        mid = good & ~tail
        out = np.where(mid, np.log(np.maximum(ndtr(b) - ndtr(a), 0.0)), out)
    return out


def fp_density_arr(d, m, s, t):
    d, m, s, t = (np.asarray(v, dtype=float) for v in (d, m, s, t))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = d / (s * _SQRT_2PI * t * np.sqrt(t)) * np.exp(-((d + m * t) ** 2) / (2.0 * s * s * t))
    return np.where((t > 0) & (d > 0), out, 0.0)


def hit_prob_total_arr(d, m, s):
    d, m, s = (np.asarray(v, dtype=float) for v in (d, m, s))
    with np.errstate(over="ignore"):
        return np.where(m > 0, np.exp(-2.0 * m * np.maximum(d, 0.0) / (s * s)), 1.0)


def killed_mass_arr(d, m, s, a, b, t):
    """P(no hit by t, Y_t in (a, b]) for 0 <= a < b <= inf, vectorised."""
    d, m, s, a, b, t = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (d, m, s, a, b, t))
    )
    a = np.maximum(a, 0.0)
    sd = s * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        center = d + m * t
        image_shift = -2.0 * m * d / (s * s)
        if np.all(np.isposinf(b)):
            if np.all(image_shift < 50.0):
                # image weight cannot overflow, plain CDFs are accurate enough
                out = ndtr((center - a) / sd) - np.exp(image_shift) * ndtr((m * t - a - d) / sd)
                return np.where((t > 0) & (d > 0), np.clip(out, 0.0, 1.0), 0.0)
            free = log_ndtr((center - a) / sd)
            image = image_shift + log_ndtr((m * t - a - d) / sd)
        else:
            free = _log_ndtr_diff((a - center) / sd, (b - center) / sd)
            image = image_shift + _log_ndtr_diff((a + d - m * t) / sd, (b + d - m * t) / sd)
        out = np.exp(free) - np.exp(image)
    ok = (t > 0) & (d > 0) & (b > a)
    return np.where(ok, np.clip(out, 0.0, 1.0), 0.0)


def survival_arr(d, m, s, t):
    return killed_mass_arr(d, m, s, 0.0, np.inf, t)


def killed_density_arr(d, m, s, y, t):
    d, m, s, y, t = (np.asarray(v, dtype=float) for v in (d, m, s, y, t))
    sd = s * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = (y - d - m * t) / sd
        free = np.exp(-0.5 * z * z) / (_SQRT_2PI * sd)
        # image/free ratio collapses to exp(-2 d y / (s^2 t))
        out = free * -np.expm1(-2.0 * d * y / (sd * sd))
    return np.where((y > 0) & (t > 0) & (d > 0), np.maximum(out, 0.0), 0.0)


def _check_time(t: float) -> None:
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")


def fp_density(pp: PassageParams, t: float) -> float:
    """Density of the first hitting time of zero at ``t``."""
    _check_time(t)
    return float(fp_density_arr(pp.d, pp.m, pp.s, t))


def hit_prob_total(pp: PassageParams) -> float:
    """Probability the barrier is ever hit."""
    return float(hit_prob_total_arr(pp.d, pp.m, pp.s))


def survival(pp: PassageParams, t: float) -> float:
    _check_time(t)
    return float(survival_arr(pp.d, pp.m, pp.s, t))


def killed_density(pp: PassageParams, y: float, t: float) -> float:
    """Density of ``Y_t`` at ``y`` on the event of no hit before ``t``."""
    _check_time(t)
    if not y > 0:
        raise ValueError(f"terminal distance must be positive, got {y}")
    return float(killed_density_arr(pp.d, pp.m, pp.s, y, t))


def killed_interval_mass(pp: PassageParams, a: float, b: float, t: float) -> float:
    _check_time(t)
    if not a < b:
        raise ValueError(f"empty interval ({a}, {b}]")
    return float(killed_mass_arr(pp.d, pp.m, pp.s, a, b, t))


def _inverse_gaussian(mean, shape, normals, uniforms):
    """Michael-Schucany-Haas transform with the cancellation-free root."""
    y = normals * normals
    a = mean * y / (2.0 * shape)
    x = mean / (1.0 + a + np.sqrt(a * (2.0 + a)))
    return np.where(uniforms * (mean + x) <= mean, x, mean * mean / x)


def sample_hitting_times(d, m, s, rng: np.random.Generator) -> np.ndarray:
    """Exact hitting times of zero; ``inf`` marks paths that never hit.

    Consumes exactly two normals' worth of draws per element (one uniform for
    the never-hit atom, one normal and one uniform for the passage time).
    """
    d, m, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (d, m, s)))
    shape = d.shape
    u_atom = rng.random(shape)
    z = rng.standard_normal(shape)
    u = rng.random(shape)
    hits = u_atom < hit_prob_total_arr(d, m, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (d / s) ** 2
        mean = d / np.abs(m)
        ig = _inverse_gaussian(mean, lam, z, u)
        levy = lam / (z * z)
    t = np.where(m == 0, levy, ig)
    return np.where(hits, t, np.inf)


def sample_hitting_time(pp: PassageParams, rng: np.random.Generator) -> float | None:
    """One exact hitting time, or ``None`` if this path never reaches zero."""
    t = float(sample_hitting_times(pp.d, pp.m, pp.s, rng))
    return None if math.isinf(t) else t


def _invert_conditional(d, m, s, t, u):
    # solve P(Y_t > y, alive) = u * P(alive) by bisection on a bracketing range
    surv = survival_arr(d, m, s, t)
    target = u * surv
    sd = s * np.sqrt(t)
    lo = np.zeros_like(d)
    hi = np.maximum(d + m * t, 0.0) + 40.0 * sd + d
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        upper = killed_mass_arr(d, m, s, mid, np.inf, t)
        go_up = upper > target
        lo = np.where(go_up, mid, lo)
        hi = np.where(go_up, hi, mid)
        if np.all(hi - lo <= 4.0 * np.finfo(float).eps * np.maximum(hi, 1e-300)):
            break
    return 0.5 * (lo + hi)


def sample_conditional_survivors(d, m, s, t, rng: np.random.Generator) -> np.ndarray:
    """Exact draws of ``Y_t`` conditional on no hit before ``t``.

    Proposals come from the free Gaussian; a proposal ``y > 0`` survives the
    image-term thinning with probability ``1 - exp(-2 d y / (s^2 t))``.
    Elements still unaccepted after ``REJECTION_ROUNDS`` are drawn by exact
    inversion of the conditional CDF instead.
    """
    d, m, s, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (d, m, s, t)))
    if np.any(t <= 0):
        raise ValueError("conditioning time must be positive")
    surv = survival_arr(d, m, s, t)
    if np.any(surv <= MIN_CONDITIONING):
        raise DegenerateConditioning("degenerate conditioning: survival probability underflowed")
    out = np.empty(d.shape)
    pending = np.ones(d.shape, dtype=bool)
    sd = s * np.sqrt(t)
    for _ in range(REJECTION_ROUNDS):
        idx = np.flatnonzero(pending)
        if idx.size == 0:
            return out
        dd, mm, ss = d.flat[idx], m.flat[idx], sd.flat[idx]
        y = dd + mm * t.flat[idx] + ss * rng.standard_normal(idx.size)
        u = rng.random(idx.size)
        with np.errstate(over="ignore"):
            keep = (y > 0) & (u < -np.expm1(-2.0 * dd * np.maximum(y, 0.0) / (ss * ss)))
        out.flat[idx[keep]] = y[keep]
        pending.flat[idx[keep]] = False
    idx = np.flatnonzero(pending)
    if idx.size:
        u = rng.random(idx.size)
        out.flat[idx] = _invert_conditional(d.flat[idx], m.flat[idx], s.flat[idx], t.flat[idx], u)
    return out


def sample_conditional_survivor(pp: PassageParams, t: float, rng: np.random.Generator) -> float:
    _check_time(t)
    return float(sample_conditional_survivors(pp.d, pp.m, pp.s, t, rng))
