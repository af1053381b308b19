"""Semi-analytic default-contagion probabilities for independent firms.

The first contagion event of a set ``I`` of live firms has a joint law that
factorises over firms: the harmonic measure puts one firm on its barrier with
first-passage density and every other firm at a killed-diffusion position.
The probability that *all* of ``J`` default at that event is an alternating
sum over strictly decreasing chains ``J > J_1 > ... > J_k`` (inclusion and
exclusion of the survivor boxes), and every chain term is again a product of
per-firm factors.

A whole event sequence ``(J_1, ..., J_m)`` is integrated over the time
simplex ``u_1 + ... + u_m <= t`` with Gauss-Legendre nodes.  For fixed event
times the integrand is a signed sum of products over firms, so each firm's
path (survive event 1 above a floor, jump down, survive event 2, ...) is a
short chain of 1-D integrals over its post-jump position.  Those are done on
composite Gauss-Legendre panels whose breakpoints follow the Gaussian bulk of
the killed kernel and the boundary layer of the next stage.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from . import passage
from .domain import IndexSet, a_box, enumerate_chains, index_set, jump_sizes
from .model import Portfolio, validate_portfolio
from .quadrature import panel_rule, simplex_points, sobol_unit_points, tensor_unit_grid

MAX_ANALYTIC_FIRMS = 6
MAX_TENSOR_DIM = 6
QMC_REPLICATES = 4
# spatial nodes materialised at once when evaluating a chunk of time nodes
CHUNK_NODES = 1 << 21


class GuardError(ValueError):
    """A size or depth guard of the analytic engine was exceeded."""


@dataclass(frozen=True)
class QuadratureSpec:
    time_nodes: int = 24
    space_nodes: int = 6
    tail_quantile: float = 1.0 - 1e-8
    max_cascade_depth: int | None = None
    method: str = "tensor"
    qmc_points: int = 2**14

    def __post_init__(self) -> None:
        if self.time_nodes < 2 or self.space_nodes < 2:
            raise ValueError("quadrature needs at least 2 nodes per level")
        if not 0.9 < self.tail_quantile < 1.0:
            raise ValueError("tail_quantile must lie in (0.9, 1)")
        if self.method not in ("tensor", "qmc"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_cascade_depth is not None and self.max_cascade_depth < 0:
            raise ValueError("max_cascade_depth must be non-negative")

    def refined(self) -> "QuadratureSpec":
        # spatial panels converge much faster than the time rule, so the
        # check run doubles time nodes and adds only two per spatial panel
        return replace(
            self,
            time_nodes=2 * self.time_nodes,
            space_nodes=self.space_nodes + 2,
            qmc_points=2 * self.qmc_points,
        )


@dataclass(frozen=True)
class Estimate:
    value: float
    error: float
    method: str


@dataclass(frozen=True)
class StageState:
    """Survivors after some events: post-jump values and the time used so far."""

    values: Mapping[int, float]
    elapsed: float = 0.0

    @property
    def survivors(self) -> IndexSet:
        return index_set(self.values)

    def check(self, portfolio: Portfolio) -> None:
        if not self.elapsed >= 0:
            raise ValueError("elapsed time must be non-negative")
        for i, v in self.values.items():
            if not v > portfolio.barrier[i]:
                raise ValueError(f"survivor {i} at {v} is not above its barrier")


@dataclass
class DistributionTable:
    labels: list[str]
    probabilities: np.ndarray
    errors: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)

    @property
    def tolerance(self) -> float:
        return float(self.errors.sum())

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.probabilities.tolist()))


# --- per-firm path programs -------------------------------------------------

# A firm's contribution to one term is a program: a list of survivor stages
# (pre-jump value must exceed ``floor``; then the value drops by ``jump``)
# followed by a final factor.  ``times`` are indices into the stage-time list,
# summed when zero-jump stages are merged by the Markov property.


@dataclass(frozen=True)
class _Stage:
    floor: float
    jump: float
    times: tuple[int, ...]


@dataclass(frozen=True)
class _Final:
    kind: str  # "fp" | "mass" | "cdf" | "one"
    threshold: float
    times: tuple[int, ...]


def _simplify(barrier: float, stages: list[_Stage], final: _Final) -> tuple[tuple[_Stage, ...], _Final]:
    if final.kind == "one" and stages:
        last = stages.pop()
        final = _Final("mass", last.floor, last.times)
    out: list[_Stage] = []
    carry: tuple[int, ...] = ()
    for st in stages:
        times = carry + st.times
        if st.jump == 0.0 and st.floor == barrier:
            carry = times
            continue
        out.append(_Stage(st.floor, st.jump, times))
        carry = ()
    if carry:
        final = replace(final, times=carry + final.times)
    return tuple(out), final


def hfull_terms(portfolio: Portfolio, J: Sequence[int]) -> list[tuple[int, dict[int, _Final]]]:
    """Signed per-firm factor sets whose sum is the total-default density of ``J``.

    Chain ``J > J_1 > ... > J_k`` contributes ``(-1)^k`` times: a trigger in
    ``J_k`` with its first-passage density, the rest of ``J_k`` alive, and each
    firm of ``J_{l-1} \\ J_l`` above ``K + sum_{J_l} C``.  Final factors carry
    time index 0 (the caller relabels).
    """
    J = index_set(J)
    k = portfolio.barrier
    out = []
    for chain in itertools.chain([()], enumerate_chains(J)):
        sign = -1 if len(chain) % 2 else 1
        levels = (J,) + chain
        base: dict[int, _Final] = {}
        for upper, lower in zip(levels[:-1], levels[1:]):
            rest = [i for i in upper if i not in lower]
            load = jump_sizes(portfolio, lower, rest)
            for i, c in zip(rest, load):
                base[i] = _Final("mass", float(k[i] + c), (0,))
        deepest = levels[-1]
        for trig in deepest:
            factors = dict(base)
            for i in deepest:
                factors[i] = _Final("fp", 0.0, (0,)) if i == trig else _Final("mass", float(k[i]), (0,))
            out.append((sign, factors))
    return out


# breakpoints in units of the local standard deviation
_BULK = (-2.5, 0.0, 2.5)
_LAYER = (0.5, 1.5, 3.0, 5.0, 8.0)
_THRESHOLD = (-4.0, -1.5, 0.0, 1.5, 4.0)
_N_BREAKS = 2 + len(_BULK) + len(_LAYER) + len(_THRESHOLD)


class _Evaluator:
    """Evaluates per-firm programs over a batch of stage-time vectors."""

    def __init__(self, portfolio: Portfolio, quad: QuadratureSpec):
        self.p = portfolio
        self.quad = quad
        self.zq = float(ndtri(quad.tail_quantile))
        # upper bound on nodes per spatial level
        self.width = (_N_BREAKS - 1) * quad.space_nodes

    def _time(self, tl: list[np.ndarray], idx: tuple[int, ...]) -> np.ndarray:
        out = tl[idx[0]]
        for j in idx[1:]:
            out = out + tl[j]
        return out

    def final(self, f: int, d: np.ndarray, fin: _Final, tl: list[np.ndarray]) -> np.ndarray:
        m, s = self.p.drift[f], self.p.sigma[f]
        if fin.kind == "one":
            return np.ones_like(d)
        u = self._time(tl, fin.times)
        if fin.kind == "fp":
            return passage.fp_density_arr(d, m, s, u)
        if fin.kind == "mass":
            lo = float(self.p.distance(f, fin.threshold))
            return passage.killed_mass_arr(d, m, s, lo, np.inf, u)
        if fin.kind == "cdf":
            # hit inside the last window after surviving any merged lead-in
            window = tl[fin.times[-1]]
            if len(fin.times) == 1:
                return 1.0 - passage.survival_arr(d, m, s, window)
            lead = self._time(tl, fin.times[:-1])
            return passage.survival_arr(d, m, s, lead) - passage.survival_arr(d, m, s, lead + window)
        raise ValueError(fin.kind)

    def program(self, f: int, v: np.ndarray, stages: tuple[_Stage, ...], fin: _Final, tl: list[np.ndarray]) -> np.ndarray:
        p = self.p
        d = p.distance(f, v)
        if not stages:
            return self.final(f, d, fin, tl)
        m, s = p.drift[f], p.sigma[f]
        st = stages[0]
        u = self._time(tl, st.times)
        sd = s * np.sqrt(u)
        center = d + m * u
        floor = float(p.distance(f, st.floor))
        lo = np.maximum(floor, center - self.zq * sd)
        hi = np.maximum(center + self.zq * sd, lo)

        # boundary layer of the next stage, mapped back to pre-jump coordinates
        if len(stages) > 1:
            nxt_times, nxt_floor = stages[1].times, stages[1].floor
        else:
            nxt_times = fin.times if fin.kind != "one" else st.times
            nxt_floor = fin.threshold if fin.kind == "mass" else p.barrier[f]
        sdn = s * np.sqrt(self._time(tl, nxt_times))
        thr = float(p.distance(f, nxt_floor))
        post = [c * sdn for c in _LAYER]
        if thr > 0.0:
            post += [thr + c * sdn for c in _THRESHOLD]
        feats = [p.distance(f, p.value(f, np.maximum(z, 0.0)) + st.jump) for z in post]
        bulk = [center + c * sd for c in _BULK]
        breaks = np.stack([lo, hi] + bulk + feats, axis=-1)
        breaks = np.sort(np.clip(breaks, lo[:, None], hi[:, None]), axis=-1)
        nodes, weights = panel_rule(breaks, self.quad.space_nodes)
        dens = passage.killed_density_arr(d[:, None], m, s, nodes, u[:, None])
        width = nodes.shape[1]
        v_next = p.value(f, nodes) - st.jump
        inner_tl = [np.repeat(t, width) for t in tl]
        inner = self.program(f, v_next.ravel(), stages[1:], fin, inner_tl).reshape(nodes.shape)
        return (weights * dens * inner).sum(axis=1)


# --- engine ------------------------------------------------------------------


class AnalyticEngine:
    def __init__(self, portfolio: Portfolio, quad: QuadratureSpec | None = None, check: bool = True):
        if check:
            bad = validate_portfolio(portfolio)
            if bad:
                raise ValueError("invalid portfolio: " + "; ".join(map(str, bad)))
        self.p = portfolio
        self.quad = quad or QuadratureSpec()
        self._terms: dict[IndexSet, list] = {}
        self._cache: dict = {}

    def _hterms(self, J: IndexSet):
        if J not in self._terms:
            self._terms[J] = hfull_terms(self.p, J)
        return self._terms[J]

    # point evaluations -----------------------------------------------------

    def _point_factor(self, f: int, value: float, fin: _Final, t: float) -> float:
        ev = _Evaluator(self.p, self.quad)
        return float(ev.final(f, np.array([float(self.p.distance(f, value))]), fin, [np.array([t])])[0])

    def h_full(self, I: Iterable[int], values: Mapping[int, float], t: float) -> float:
        """Density in ``t`` of "every firm of ``I`` defaults at the first event"."""
        I = index_set(I)
        if not t > 0:
            raise ValueError("t must be positive")
        self._check_alive(I, values)
        total = 0.0
        for sign, factors in self._hterms(I):
            prod = 1.0
            for f, fin in factors.items():
                prod *= self._point_factor(f, values[f], fin, t)
                if prod == 0.0:
                    break
            total += sign * prod
        return total

    def g_mass(self, I: Iterable[int], J: Iterable[int], values: Mapping[int, float], t: float) -> float:
        """Probability that every firm of ``I \\ J`` is alive above its survivor floor at ``t``."""
        box = a_box(I, J, self.p)
        self._check_alive(box.coords, values)
        out = 1.0
        for f, floor in zip(box.coords, box.lower):
            out *= self._point_factor(f, values[f], _Final("mass", floor, (0,)), t)
        return out

    def h_sub_kernel(self, I, J, values: Mapping[int, float], t: float, box=None) -> float:
        """Density of "exactly ``J`` defaults at the first event at ``t``", survivors
        restarting (post-jump) inside ``box`` (default: anywhere above the barrier)."""
        I, J = index_set(I), index_set(J)
        full = a_box(I, J, self.p)
        if box is None:
            lower = [self.p.barrier[i] for i in full.coords]
            upper = [math.inf] * len(full.coords)
        else:
            if tuple(box.coords) != full.coords:
                raise ValueError(f"box coordinates {box.coords} must equal I \\ J = {full.coords}")
            if any(lo < self.p.barrier[i] for i, lo in zip(box.coords, box.lower)):
                raise ValueError("box lower bounds must be at or above the barriers")
            lower, upper = list(box.lower), list(box.upper)
        self._check_alive(I, values)
        out = self.h_full(J, values, t)
        shift = jump_sizes(self.p, J, full.coords)
        for f, lo, hi, c in zip(full.coords, lower, upper, shift):
            d = float(self.p.distance(f, values[f]))
            a = float(self.p.distance(f, lo + c))
            b = math.inf if math.isinf(hi) else float(self.p.distance(f, hi + c))
            out *= float(passage.killed_mass_arr(d, self.p.drift[f], self.p.sigma[f], a, b, t))
        return out

    def _check_alive(self, ids, values):
        for i in ids:
            if not values[i] > self.p.barrier[i]:
                raise ValueError(f"firm {i} is not above its barrier")

    # sequence integrals ----------------------------------------------------

    def _programs(self, start: IndexSet, seq: tuple[IndexSet, ...], terminal: str, cdf_last: bool, combo):
        """Per-firm programs for one choice of chain term at every integrated stage."""
        k = self.p.barrier
        n_int = len(seq) - 1 if cdf_last else len(seq)
        resid = n_int
        stage_of = {f: j for j, J in enumerate(seq) for f in J}
        progs = {}
        for f in start:
            s = stage_of.get(f, len(seq))
            stages = []
            for j in range(min(s, len(seq))):
                c = float(jump_sizes(self.p, seq[j], [f])[0])
                stages.append(_Stage(float(k[f] + c), c, (j,)))
            if s == len(seq):
                fin = _Final("mass", float(k[f]), (resid,)) if terminal == "survive_all" else _Final("one", 0.0, ())
            elif cdf_last and s == len(seq) - 1:
                fin = _Final("cdf", 0.0, (resid,))
            else:
                f0 = combo[s][1][f]
                fin = _Final(f0.kind, f0.threshold, (s,))
            progs[f] = _simplify(float(k[f]), stages, fin)
        return progs

    def _sequence_value(self, start, x0, seq, t, terminal, quad: QuadratureSpec) -> tuple[float, float, str]:
        m = len(seq)
        live_after = set(start).difference(*seq) if seq else set(start)
        cdf_last = m > 0 and not live_after and len(seq[-1]) == 1
        n_int = m - 1 if cdf_last else m
        method = quad.method
        if method == "tensor" and n_int > MAX_TENSOR_DIM:
            method = "qmc"
        if method == "tensor":
            batches = [tensor_unit_grid(n_int, quad.time_nodes)]
        else:
            batches = [sobol_unit_points(n_int, quad.qmc_points, seed=r) for r in range(QMC_REPLICATES)]
        ev = _Evaluator(self.p, quad)
        stage_terms = [self._hterms(J) for J in seq[:n_int]]
        terms = []
        for combo in itertools.product(*stage_terms):
            progs = self._programs(start, seq, terminal, cdf_last, combo)
            terms.append((math.prod(c[0] for c in combo), [(f,) + progs[f] for f in sorted(progs)]))
        depth = max((len(key[1]) for _, keys in terms for key in keys), default=0)
        per_point = (ev.width) ** depth
        chunk = max(1, CHUNK_NODES // per_point)
        results = []
        for unit, wts in batches:
            acc = 0.0
            for lo in range(0, len(wts), chunk):
                times, jac, resid = simplex_points(unit[lo : lo + chunk], t)
                tl = times + [resid]
                weights = wts[lo : lo + chunk] * jac
                memo: dict = {}
                total = np.zeros(len(weights))
                for sign, keys in terms:
                    prod = np.ones(len(weights))
                    for key in keys:
                        if key not in memo:
                            f, stages, fin = key
                            v = np.full(len(weights), float(x0[f]))
                            memo[key] = ev.program(f, v, stages, fin, tl)
                        prod = prod * memo[key]
                    total += sign * prod
                acc += float(np.dot(weights, total))
            results.append(acc)
        spread = float(np.std(results, ddof=1) / math.sqrt(len(results))) if len(results) > 1 else 0.0
        return float(np.mean(results)), spread, method

    def sequence_integral(
        self,
        seq: Sequence[Iterable[int]],
        t: float,
        terminal: str = "survive_all",
        start: Mapping[int, float] | StageState | None = None,
    ) -> Estimate:
        """Probability that the first events are exactly ``seq``, all by ``t``.

        With ``terminal="survive_all"`` the remaining firms must also outlive
        ``t`` (so exactly ``len(seq)`` events happen by ``t``).  ``start``
        restarts the clock from a set of survivors; a :class:`StageState`
        also carries the time already elapsed.
        """
        if terminal not in ("survive_all", "none"):
            raise ValueError(f"unknown terminal {terminal!r}")
        if not t > 0:
            raise ValueError("t must be positive")
        if isinstance(start, StageState):
            start.check(self.p)
            t = t - start.elapsed
            if not t > 0:
                raise ValueError("horizon is not after the stage's elapsed time")
            start = dict(start.values)
        if start is None:
            start = {i: float(v) for i, v in enumerate(self.p.x0)}
        start_ids = index_set(start)
        self._check_alive(start_ids, start)
        seq = tuple(index_set(J) for J in seq)
        seen: set[int] = set()
        for J in seq:
            if not J:
                raise ValueError("default sets must be non-empty")
            if seen & set(J) or not set(J) <= set(start_ids):
                raise ValueError("default sets must be disjoint subsets of the live firms")
            seen |= set(J)
        depth = self.quad.max_cascade_depth
        if depth is not None and len(seq) > depth:
            raise GuardError(f"cascade depth guard: sequence length {len(seq)} > max_cascade_depth {depth}")
        if len(start_ids) > MAX_ANALYTIC_FIRMS:
            raise GuardError(f"size guard: {len(start_ids)} firms > {MAX_ANALYTIC_FIRMS}")
        key = (tuple(sorted(start.items())), seq, float(t), terminal)
        if key not in self._cache:
            coarse, _, method = self._sequence_value(start_ids, start, seq, t, terminal, self.quad)
            fine, spread, _ = self._sequence_value(start_ids, start, seq, t, terminal, self.quad.refined())
            err = abs(fine - coarse) + spread if method == "qmc" else abs(fine - coarse)
            self._cache[key] = Estimate(fine, err, method)
        return self._cache[key]

    # distributions -----------------------------------------------------------

    def sequences(self, ids: Iterable[int] | None = None, avoid: Iterable[int] = ()) -> Iterator[tuple[IndexSet, ...]]:
        ids = index_set(range(self.p.n) if ids is None else ids)
        avoid = set(avoid)
        pool = tuple(i for i in ids if i not in avoid)
        depth = self.quad.max_cascade_depth
        limit = len(pool) if depth is None else min(depth, len(pool))
        if self.p.n > MAX_ANALYTIC_FIRMS:
            raise GuardError(f"size guard: {self.p.n} firms > {MAX_ANALYTIC_FIRMS}")

        def walk(left: tuple[int, ...], prefix):
            yield prefix
            if len(prefix) >= limit:
                return
            for size in range(1, len(left) + 1):
                for J in itertools.combinations(left, size):
                    rest = tuple(i for i in left if i not in J)
                    yield from walk(rest, prefix + (J,))

        return walk(pool, ())

    def _truncated(self) -> bool:
        depth = self.quad.max_cascade_depth
        return depth is not None and depth < self.p.n

    def _method_tag(self, methods: set[str]) -> str:
        tag = "+".join(sorted(methods)) or "closed"
        if self._truncated():
            tag += f"(depth<={self.quad.max_cascade_depth})"
        return tag

    def prob_N_t(self, t: float) -> DistributionTable:
        n = self.p.n
        probs = np.zeros(n + 1)
        errs = np.zeros(n + 1)
        methods = set()
        for seq in self.sequences():
            est = self.sequence_integral(seq, t)
            k = sum(len(J) for J in seq)
            probs[k] += est.value
            errs[k] += est.error
            methods.add(est.method)
        return DistributionTable([str(k) for k in range(n + 1)], probs, errs, self._method_tag(methods))

    def prob_tau_m_tail(self, m: int, t: float) -> Estimate:
        """P(tau(m) > t): fewer than ``m`` contagion events by ``t``."""
        if not 1 <= m <= self.p.n:
            raise ValueError(f"m must lie in 1..{self.p.n}")
        depth = self.quad.max_cascade_depth
        if depth is not None and m - 1 > depth:
            raise GuardError(f"cascade depth guard: tau({m}) needs sequences of length {m - 1} > max_cascade_depth {depth}")
        value = err = 0.0
        methods = set()
        for seq in self.sequences():
            if len(seq) < m:
                est = self.sequence_integral(seq, t)
                value += est.value
                err += est.error
                methods.add(est.method)
        return Estimate(value, err, self._method_tag(methods))

    def joint_survival(self, firms: Iterable[int], t: float) -> Estimate:
        K = index_set(firms)
        if not K or not set(K) <= set(range(self.p.n)):
            raise ValueError("firm set must be a non-empty subset of the portfolio")
        value = err = 0.0
        methods = set()
        for seq in self.sequences(avoid=K):
            est = self.sequence_integral(seq, t)
            value += est.value
            err += est.error
            methods.add(est.method)
        return Estimate(value, err, self._method_tag(methods))


# --- functional front end ------------------------------------------------------


def g_mass(portfolio, I, J, values, t, quad=None) -> float:
    return AnalyticEngine(portfolio, quad, check=False).g_mass(I, J, values, t)


def h_full(portfolio, I, values, t, quad=None) -> float:
    return AnalyticEngine(portfolio, quad, check=False).h_full(I, values, t)


def h_sub_kernel(portfolio, I, J, values, t, box=None, quad=None) -> float:
    return AnalyticEngine(portfolio, quad, check=False).h_sub_kernel(I, J, values, t, box)


def cascade_sequence_integral(portfolio, seq, t, terminal="survive_all", quad=None, start=None) -> Estimate:
    return AnalyticEngine(portfolio, quad).sequence_integral(seq, t, terminal, start)


def prob_N_t(portfolio, t, quad=None) -> DistributionTable:
    return AnalyticEngine(portfolio, quad).prob_N_t(t)


def prob_tau_m_tail(portfolio, m, t, quad=None) -> Estimate:
    return AnalyticEngine(portfolio, quad).prob_tau_m_tail(m, t)


def joint_survival(portfolio, firms, t, quad=None) -> Estimate:
    return AnalyticEngine(portfolio, quad).joint_survival(firms, t)
