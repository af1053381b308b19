"""Monte Carlo simulators of the contagion model and estimators.

``exact_renewal`` walks the chain of contagion events: exact hitting times
for the live firms, exact positions of the other firms conditional on having
survived until the first hit, cascade closure, jumps, repeat.  ``euler``
steps all firms on a grid with exact Gaussian increments and an optional
Brownian-bridge crossing test.  They share the rng plumbing only.

Paths are processed in fixed blocks of ``BLOCK_SIZE``; block ``b`` draws from
a Philox stream keyed by ``(seed, b)``, so results never depend on how many
worker threads are used.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import passage
from .domain import cascade_closure_batch
from .model import Portfolio

BLOCK_SIZE = 1 << 15
# crossing probabilities below exp(-50) are not drawn
_BRIDGE_CUTOFF = 50.0


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    horizon: float
    seed: int = 0
    scheme: str = "exact_renewal"
    dt: float | None = None
    bridge_correction: bool = True
    threads: int = 1
    keep_values: bool = False

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.scheme not in ("exact_renewal", "euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme == "euler" and self.step >= self.horizon:
            raise ValueError("dt must be smaller than the horizon")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def step(self) -> float:
        return self.horizon * 2.0**-10 if self.dt is None else self.dt


@dataclass(frozen=True)
class CascadeEvent:
    time: float
    defaults: tuple[int, ...]
    pre_values: dict[int, float]
    survivor_values: dict[int, float]


@dataclass(frozen=True)
class CascadeRecord:
    path: int
    events: tuple[CascadeEvent, ...]
    censored: bool

    @property
    def n_star(self) -> int:
        return len(self.events)


@dataclass
class SimResult:
    """Array form of an ensemble: row ``p`` is path ``p``.

    ``times[p, j]`` is the j-th contagion time (inf when absent) and
    ``sets[p, j]`` the bitmask of firms defaulting at it.
    """

    config: SimConfig
    n_firms: int
    times: np.ndarray
    sets: np.ndarray
    censored: np.ndarray
    pre: np.ndarray | None = None
    post: np.ndarray | None = None
    ties: int = 0

    @property
    def n_paths(self) -> int:
        return len(self.times)

    @property
    def n_events(self) -> np.ndarray:
        return np.isfinite(self.times).sum(axis=1)

    def records(self) -> Iterator[CascadeRecord]:
        for p in range(self.n_paths):
            events = []
            for j in range(int(np.isfinite(self.times[p]).sum())):
                mask = int(self.sets[p, j])
                ids = tuple(i for i in range(self.n_firms) if mask >> i & 1)
                pre = post = {}
                if self.pre is not None:
                    live = ~np.isnan(self.pre[p, j])
                    pre = {i: float(self.pre[p, j, i]) for i in np.flatnonzero(live)}
                    post = {
                        i: float(self.post[p, j, i])
                        for i in np.flatnonzero(~np.isnan(self.post[p, j]))
                    }
                events.append(CascadeEvent(float(self.times[p, j]), ids, pre, post))
            yield CascadeRecord(p, tuple(events), bool(self.censored[p]))


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _bits(n: int) -> np.ndarray:
    return (1 << np.arange(n)).astype(np.int64)


class _Block:
    def __init__(self, size: int, n: int, keep: bool):
        self.times = np.full((size, n), np.inf)
        self.sets = np.zeros((size, n), dtype=np.int64)
        self.count = np.zeros(size, dtype=np.int64)
        self.pre = np.full((size, n, n), np.nan) if keep else None
        self.post = np.full((size, n, n), np.nan) if keep else None
        self.ties = 0

    def record(self, rows, when, defaulted, pre_values, post_values, alive_before, bits):
        j = self.count[rows]
        self.times[rows, j] = when
        self.sets[rows, j] = defaulted.astype(np.int64) @ bits
        if self.pre is not None:
            self.pre[rows, j] = np.where(alive_before, pre_values, np.nan)
            survivors = alive_before & ~defaulted
            self.post[rows, j] = np.where(survivors, post_values, np.nan)
        self.count[rows] += 1


def _values(p: Portfolio, dist: np.ndarray) -> np.ndarray:
    k = p.barrier
    if p.kind.value == "gbm":
        return k * np.exp(dist)
    return k + dist


def _dists(p: Portfolio, values: np.ndarray) -> np.ndarray:
    k = p.barrier
    if p.kind.value == "gbm":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(values) - np.log(k)
    return values - k


def _exact_block(p: Portfolio, cfg: SimConfig, size: int, rng: np.random.Generator):
    n = p.n
    m, s, k, c = p.drift, p.sigma, p.barrier, p.contagion
    bits = _bits(n)
    out = _Block(size, n, cfg.keep_values)
    values = np.tile(p.x0, (size, 1))
    alive = np.ones((size, n), dtype=bool)
    now = np.zeros(size)
    active = np.ones(size, dtype=bool)
    for _ in range(n):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        live = alive[rows]
        dist = np.where(live, _dists(p, values[rows]), 1.0)
        hit = passage.sample_hitting_times(dist, m, s, rng)
        hit = np.where(live, hit, np.inf)
        trig = np.argmin(hit, axis=1)
        first = hit[np.arange(rows.size), trig]
        out.ties += int((np.sum(hit == first[:, None], axis=1) > 1).sum())
        fired = first <= cfg.horizon - now[rows]
        active[rows[~fired]] = False
        rows, live, dist, trig, first = rows[fired], live[fired], dist[fired], trig[fired], first[fired]
        if rows.size == 0:
            break
        trig_mask = np.zeros_like(live)
        trig_mask[np.arange(rows.size), trig] = True
        others = live & ~trig_mask
        pos = np.zeros_like(dist)
        r_i, f_i = np.nonzero(others)
        if r_i.size:
            pos[r_i, f_i] = passage.sample_conditional_survivors(dist[r_i, f_i], m[f_i], s[f_i], first[r_i], rng)
        pre = np.where(trig_mask, k, _values(p, pos))
        defaulted = cascade_closure_batch(trig_mask, pre, live, k, c)
        post = pre - defaulted.astype(float) @ c
        now[rows] += first
        out.record(rows, now[rows], defaulted, pre, post, live, bits)
        alive[rows] = live & ~defaulted
        values[rows] = np.where(alive[rows], post, values[rows])
        active[rows] = alive[rows].any(axis=1)
    return out


def _euler_block(p: Portfolio, cfg: SimConfig, size: int, rng: np.random.Generator):
    n = p.n
    m, s, k, c = p.drift, p.sigma, p.barrier, p.contagion
    bits = _bits(n)
    out = _Block(size, n, cfg.keep_values)
    steps = max(1, int(round(cfg.horizon / cfg.step)))
    h = cfg.horizon / steps
    drift = m * h
    vol = s * math.sqrt(h)
    var = s * s * h
    dist = np.tile(_dists(p, p.x0), (size, 1))
    alive = np.ones((size, n), dtype=bool)
    # working arrays hold unfinished paths only; act maps them to block rows
    act = np.arange(size)
    for step in range(steps):
        z = rng.standard_normal((act.size, n))
        new = dist + drift + vol * z
        hit = alive & (new <= 0.0)
        if cfg.bridge_correction:
            with np.errstate(invalid="ignore", over="ignore"):
                expo = 2.0 * dist * new / var
            near = alive & ~hit & (expo < _BRIDGE_CUTOFF)
            r_i, f_i = np.nonzero(near)
            if r_i.size:
                u = rng.random(r_i.size)
                crossed = u < np.exp(-expo[r_i, f_i])
                hit[r_i[crossed], f_i[crossed]] = True
        loc = np.flatnonzero(hit.any(axis=1))
        if loc.size:
            live = alive[loc]
            seed_mask = hit[loc]
            out.ties += int((seed_mask.sum(axis=1) > 1).sum())
            pre = np.where(seed_mask, k, _values(p, np.maximum(new[loc], 0.0)))
            defaulted = cascade_closure_batch(seed_mask, pre, live, k, c)
            post = pre - defaulted.astype(float) @ c
            out.record(act[loc], (step + 0.5) * h, defaulted, pre, post, live, bits)
            still = live & ~defaulted
            alive[loc] = still
            new[loc] = np.where(still, _dists(p, np.where(still, post, 1.0)), new[loc])
        dist = np.where(alive, new, dist)
        running = alive.any(axis=1)
        n_run = int(running.sum())
        if n_run == 0:
            break
        if 4 * n_run < 3 * act.size:
            act, dist, alive = act[running], dist[running], alive[running]
    return out


def simulate(p: Portfolio, cfg: SimConfig) -> SimResult:
    """Run ``cfg.n_paths`` paths; identical output for any thread count."""
    kernel = _exact_block if cfg.scheme == "exact_renewal" else _euler_block
    n_blocks = -(-cfg.n_paths // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, cfg.n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]

    def run(b: int) -> _Block:
        return kernel(p, cfg, sizes[b], block_rng(cfg.seed, b))

    threads = max(1, int(cfg.threads))
    if threads == 1 or n_blocks == 1:
        blocks = [run(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run, range(n_blocks)))
    sets = np.concatenate([b.sets for b in blocks])
    # censored: the horizon was reached with somebody still alive
    everyone = (1 << p.n) - 1
    result = SimResult(
        config=cfg,
        n_firms=p.n,
        times=np.concatenate([b.times for b in blocks]),
        sets=sets,
        censored=np.bitwise_or.reduce(sets, axis=1) != everyone,
        pre=np.concatenate([b.pre for b in blocks]) if cfg.keep_values else None,
        post=np.concatenate([b.post for b in blocks]) if cfg.keep_values else None,
        ties=sum(b.ties for b in blocks),
    )
    return result


def simulate_exact_renewal(p: Portfolio, cfg: SimConfig) -> Iterator[CascadeRecord]:
    if cfg.scheme != "exact_renewal":
        raise ValueError("config scheme must be exact_renewal")
    return simulate(p, cfg).records()


def simulate_euler(p: Portfolio, cfg: SimConfig) -> Iterator[CascadeRecord]:
    if cfg.scheme != "euler":
        raise ValueError("config scheme must be euler")
    return simulate(p, cfg).records()


# --- estimation ------------------------------------------------------------------


def std_error(p_hat, n: int):
    return np.sqrt(np.asarray(p_hat) * (1.0 - np.asarray(p_hat)) / n)


@dataclass
class EnsembleStats:
    n_paths: int
    n_t_counts: np.ndarray
    tau_tail: dict[int, float]
    firm_survival: np.ndarray
    set_survival: dict[tuple[int, ...], float] = field(default_factory=dict)

    @property
    def n_t(self) -> np.ndarray:
        return self.n_t_counts / self.n_paths

    def se(self, p_hat) -> np.ndarray:
        return std_error(p_hat, self.n_paths)


def _arrays(records) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(records, SimResult):
        return records.times, records.sets, records.n_firms
    records = list(records)
    n = max((max(e.defaults) for r in records for e in r.events), default=0) + 1
    width = max((len(r.events) for r in records), default=0)
    times = np.full((len(records), max(width, 1)), np.inf)
    sets = np.zeros((len(records), max(width, 1)), dtype=np.int64)
    for p, r in enumerate(records):
        for j, e in enumerate(r.events):
            times[p, j] = e.time
            sets[p, j] = sum(1 << i for i in e.defaults)
    return times, sets, n


def estimate(
    records: SimResult | Iterable[CascadeRecord],
    t: float,
    taus: Sequence[int] = (),
    firm_sets: Sequence[Sequence[int]] = (),
    n_firms: int | None = None,
) -> EnsembleStats:
    """Counts of N_t, tails P(tau(m) > t) and survival frequencies at ``t``."""
    times, sets, n = _arrays(records)
    if n_firms is not None:
        n = n_firms
    by_t = times <= t
    n_events = by_t.sum(axis=1)
    dead = np.bitwise_or.reduce(np.where(by_t, sets, 0), axis=1)
    k = np.array([bin(int(x)).count("1") for x in range(1 << n)])[dead] if n <= 20 else None
    counts = np.bincount(k, minlength=n + 1)
    firm_surv = np.array([np.mean((dead >> i) & 1 == 0) for i in range(n)])
    tails = {m: float(np.mean(n_events < m)) for m in taus}
    set_surv = {}
    for ids in firm_sets:
        mask = sum(1 << i for i in ids)
        set_surv[tuple(sorted(ids))] = float(np.mean((dead & mask) == 0))
    return EnsembleStats(len(times), counts, tails, firm_surv, set_surv)


@dataclass
class Comparison:
    labels: list[str]
    analytic: np.ndarray
    mc: np.ndarray
    se: np.ndarray
    tolerance: np.ndarray
    z: np.ndarray
    passed: np.ndarray
    limit: float = 3.0

    @property
    def ok(self) -> bool:
        return bool(self.passed.all())

    def rows(self) -> list[dict]:
        return [
            {
                "label": lab,
                "analytic": float(a),
                "mc": float(b),
                "se": float(se),
                "tolerance": float(tol),
                "z": float(z),
                "pass": bool(ok),
            }
            for lab, a, b, se, tol, z, ok in zip(
                self.labels, self.analytic, self.mc, self.se, self.tolerance, self.z, self.passed
            )
        ]


def compare(
    analytic: dict[str, tuple[float, float]],
    mc: dict[str, float],
    n_paths: int | None = None,
    limit: float = 3.0,
    se: dict[str, float] | None = None,
) -> Comparison:
    """z-scores of analytic values against MC frequencies.

    ``analytic`` maps label to (value, quadrature tolerance); an entry passes
    when ``|analytic - mc| <= limit * SE + tolerance``, evaluated in floating
    point as written.  SEs come from ``se`` or from the binomial formula.
    """
    if set(analytic) != set(mc):
        raise ValueError(f"label mismatch: {sorted(set(analytic) ^ set(mc))}")
    if (n_paths is None) == (se is None):
        raise ValueError("give exactly one of n_paths and se")
    labels = list(analytic)
    a = np.array([analytic[k][0] for k in labels])
    tol = np.array([analytic[k][1] for k in labels])
    b = np.array([mc[k] for k in labels])
    if se is None:
        err = std_error(b, n_paths)
        # a frequency of exactly 0 or 1 still carries one path of resolution
        err = np.where(err > 0, err, 1.0 / n_paths)
    else:
        err = np.array([se[k] for k in labels], dtype=float)
    diff = a - b
    z = diff / err
    passed = np.abs(diff) <= limit * err + tol
    return Comparison(labels, a, b, err, tol, z, passed, limit)


def default_threads() -> int:
    env = os.environ.get("DOMINO_THREADS")
    return int(env) if env else 1
