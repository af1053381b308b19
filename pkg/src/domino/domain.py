"""Contagion-domain set algebra.

A *boundary point* is the pre-jump state of a set of firms ``I`` at the first
contagion time: exactly one firm (the trigger) sits on its barrier and every
other firm is strictly above its own.  The set of firms that default at that
instant is the least fixpoint of

    J <- {trigger};  add j with value_j <= K_j + sum_{l in J} C[l, j]

and the states leading to a given ``J`` form the domain ``D^I_J``.  The
permutation form of the same domain (nested intervals along an ordering of
``J``) is kept as an independent brute-force check of the fixpoint.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .model import Portfolio

IndexSet = tuple[int, ...]
# J_1 > J_2 > ... > J_k, strictly decreasing and non-empty
DefaultChain = tuple[IndexSet, ...]

MAX_PERMUTATION_SIZE = 9
MAX_CHAIN_UNIVERSE = 12


def index_set(ids: Iterable[int]) -> IndexSet:
    """Canonical (sorted, duplicate-free) form of a set of firm ids."""
    ids = [int(i) for i in ids]
    out = tuple(sorted(set(ids)))
    if len(out) != len(ids):
        raise ValueError(f"duplicate firm ids in {ids}")
    return out


@dataclass(frozen=True)
class BoundaryPoint:
    values: Mapping[int, float]
    trigger: int

    @property
    def index(self) -> IndexSet:
        return tuple(sorted(self.values))

    def check(self, portfolio: Portfolio) -> None:
        k = portfolio.barrier
        if self.trigger not in self.values:
            raise ValueError(f"trigger {self.trigger} not among the coordinates")
        for i, v in self.values.items():
            if i == self.trigger and v != k[i]:
                raise ValueError(f"trigger {i} is not on its barrier")
            if i != self.trigger and not v > k[i]:
                raise ValueError(f"firm {i} is not strictly above its barrier")


@dataclass(frozen=True)
class Box:
    """Product of intervals ``(lower, upper]`` over ``coords``; open at inf."""

    coords: IndexSet
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if not len(self.coords) == len(self.lower) == len(self.upper):
            raise ValueError("box bounds do not match its coordinates")
        for c, lo, hi in zip(self.coords, self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"empty interval on coordinate {c}: ({lo}, {hi}]")

    def contains(self, values: Mapping[int, float]) -> bool:
        return all(lo < values[c] <= hi for c, lo, hi in zip(self.coords, self.lower, self.upper))


def jump_sizes(portfolio: Portfolio, defaulted: Iterable[int], victims: Iterable[int]) -> np.ndarray:
    """Total jump ``sum_{j in defaulted} C[j, i]`` for each victim ``i``."""
    defaulted = list(defaulted)
    victims = list(victims)
    if not defaulted:
        return np.zeros(len(victims))
    return portfolio.contagion[np.ix_(defaulted, victims)].sum(axis=0)


def cascade_closure(trigger: int, point: BoundaryPoint, portfolio: Portfolio) -> IndexSet:
    """Set of firms that default together with ``trigger``.

    Rounds add every eligible firm at once; thresholds only grow with ``J``
    so the result does not depend on the order of additions.
    """
    k = portfolio.barrier
    c = portfolio.contagion
    values = point.values
    defaulted = {trigger}
    while True:
        load = c[sorted(defaulted)].sum(axis=0)
        new = {j for j, v in values.items() if j not in defaulted and v <= k[j] + load[j]}
        if not new:
            return index_set(defaulted)
        defaulted |= new


def cascade_closure_batch(
    trigger: np.ndarray, values: np.ndarray, alive: np.ndarray, barrier: np.ndarray, contagion: np.ndarray
) -> np.ndarray:
    """Vectorised closure over rows: ``trigger`` and ``alive`` are (B, n) masks."""
    defaulted = trigger & alive
    while True:
        threshold = barrier + defaulted.astype(float) @ contagion
        new = alive & ~defaulted & (values <= threshold)
        if not new.any():
            return defaulted
        defaulted = defaulted | new


def _in_permutation_domain(values: Mapping[int, float], order: tuple[int, ...], portfolio: Portfolio) -> bool:
    k = portfolio.barrier
    c = portfolio.contagion
    if values[order[0]] != k[order[0]]:
        return False
    for pos in range(1, len(order)):
        j = order[pos]
        upper = k[j] + sum(c[order[q], j] for q in range(pos))
        if not k[j] < values[j] <= upper:
            return False
    return True


def member_DIJ(point: BoundaryPoint, J: Iterable[int], portfolio: Portfolio, mode: str = "closure") -> bool:
    """Whether the boundary point lies in ``D^I_J`` (``I`` = its coordinates)."""
    J = index_set(J)
    I = point.index
    if not J or not set(J) <= set(I):
        return False
    rest = [i for i in I if i not in J]
    load = jump_sizes(portfolio, J, rest)
    k = portfolio.barrier
    outside_ok = all(point.values[i] > k[i] + load[q] for q, i in enumerate(rest))
    if mode == "closure":
        if point.trigger not in J:
            return False
        return outside_ok and cascade_closure(point.trigger, point, portfolio) == J
    if mode == "permutation":
        if len(J) > MAX_PERMUTATION_SIZE:
            raise ValueError(f"permutation mode limited to |J| <= {MAX_PERMUTATION_SIZE}, got {len(J)}")
        if not outside_ok:
            return False
        return any(_in_permutation_domain(point.values, order, portfolio) for order in itertools.permutations(J))
    raise ValueError(f"unknown mode {mode!r}")


def classify_boundary(point: BoundaryPoint, portfolio: Portfolio) -> IndexSet:
    return cascade_closure(point.trigger, point, portfolio)


def a_box(I: Iterable[int], J: Iterable[int], portfolio: Portfolio) -> Box:
    """Survivor box: coordinate ``i`` ranges over ``(K_i + sum_J C[j, i], inf)``."""
    I, J = index_set(I), index_set(J)
    if not J:
        raise ValueError("J must be non-empty")
    if not set(J) < set(I):
        raise ValueError(f"J={J} is not a proper subset of I={I}")
    rest = tuple(i for i in I if i not in J)
    lower = portfolio.barrier[list(rest)] + jump_sizes(portfolio, J, rest)
    return Box(rest, tuple(float(v) for v in lower), (math.inf,) * len(rest))


def shift_box(I: Iterable[int], J: Iterable[int], box: Box, portfolio: Portfolio, inverse: bool = False) -> Box:
    """Translate post-jump bounds to pre-jump ones (or back with ``inverse``)."""
    I, J = index_set(I), index_set(J)
    if set(box.coords) & set(J) or not set(box.coords) <= set(I):
        raise ValueError("box coordinates must lie in I \\ J")
    shift = jump_sizes(portfolio, J, box.coords)
    if inverse:
        shift = -shift
    return Box(
        box.coords,
        tuple(float(lo + s) for lo, s in zip(box.lower, shift)),
        tuple(float(hi + s) for hi, s in zip(box.upper, shift)),
    )


def _proper_subsets(ids: IndexSet) -> Iterator[IndexSet]:
    for size in range(len(ids) - 1, 0, -1):
        yield from itertools.combinations(ids, size)


def enumerate_chains(I: Iterable[int], max_len: int | None = None) -> Iterator[DefaultChain]:
    """Strictly decreasing chains ``J_1 > J_2 > ... > J_k`` of non-empty proper subsets.

    Depth-first, larger subsets first; the empty chain is not yielded.
    """
    I = index_set(I)
    if len(I) > MAX_CHAIN_UNIVERSE:
        raise ValueError(f"chain enumeration limited to |I| <= {MAX_CHAIN_UNIVERSE}, got {len(I)}")
    limit = len(I) - 1 if max_len is None else min(max_len, len(I) - 1)

    def walk(top: IndexSet, prefix: DefaultChain) -> Iterator[DefaultChain]:
        if len(prefix) >= limit:
            return
        for sub in _proper_subsets(top):
            chain = prefix + (sub,)
            yield chain
            yield from walk(sub, chain)

    return walk(I, ())


def chain_count(size: int) -> int:
    """Number of chains :func:`enumerate_chains` yields for ``|I| = size``."""
    counts = [0] * (size + 1)
    for n in range(2, size + 1):
        counts[n] = sum(math.comb(n, k) * (1 + counts[k]) for k in range(1, n))
    return counts[size] if size >= 1 else 0
