"""Portfolio data model, validation and reduction to a first-passage coordinate.

Firm values are either arithmetic (ABM) or geometric (GBM) Brownian motions
killed at a constant barrier.  Every passage computation runs on the
*reduced* distance to the barrier, which is an arithmetic Brownian motion in
both cases:

    ABM:  d = x - K,          drift mu,                vol sigma
    GBM:  d = ln x - ln K,    drift mu - sigma**2 / 2, vol sigma

Contagion jumps stay additive in value space for both kinds.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# n x n jump sizes, row = defaulter, column = victim
ContagionMatrix = np.ndarray


class ModelKind(str, enum.Enum):
    ABM = "abm"
    GBM = "gbm"


@dataclass(frozen=True)
class FirmParams:
    id: int
    x0: float
    barrier: float
    mu: float
    sigma: float


@dataclass(frozen=True)
class AbmCoord:
    """Reduced first-passage coordinate of one firm."""

    d: float
    m: float
    s: float


@dataclass(frozen=True)
class Violation:
    firm: int | None
    field: str
    rule: str

    def __str__(self) -> str:
        firm = "-" if self.firm is None else str(self.firm)
        return f"firm={firm} field={self.field} rule={self.rule}"


class ConfigError(ValueError):
    """Raised when a portfolio config file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class Portfolio:
    firms: tuple[FirmParams, ...]
    contagion: ContagionMatrix
    kind: ModelKind = ModelKind.ABM
    _arrays: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "firms", tuple(self.firms))
        c = np.array(self.contagion, dtype=float)
        if c.ndim == 1 and c.size == 0:
            c = c.reshape(0, 0)
        c.setflags(write=False)
        object.__setattr__(self, "contagion", c)
        object.__setattr__(self, "kind", ModelKind(self.kind))

    @classmethod
    def from_arrays(
        cls,
        x0: Sequence[float],
        barrier: Sequence[float],
        mu: Sequence[float],
        sigma: Sequence[float],
        contagion: Sequence[Sequence[float]] | np.ndarray,
        kind: ModelKind | str = ModelKind.ABM,
    ) -> "Portfolio":
        firms = tuple(
            FirmParams(i, float(a), float(b), float(c), float(d))
            for i, (a, b, c, d) in enumerate(zip(x0, barrier, mu, sigma))
        )
        return cls(firms, np.asarray(contagion, dtype=float), ModelKind(kind))

    @property
    def n(self) -> int:
        return len(self.firms)

    def _array(self, name: str) -> np.ndarray:
        if name not in self._arrays:
            arr = np.array([getattr(f, name) for f in self.firms], dtype=float)
            arr.setflags(write=False)
            self._arrays[name] = arr
        return self._arrays[name]

    @property
    def x0(self) -> np.ndarray:
        return self._array("x0")

    @property
    def barrier(self) -> np.ndarray:
        return self._array("barrier")

    @property
    def mu(self) -> np.ndarray:
        return self._array("mu")

    @property
    def sigma(self) -> np.ndarray:
        return self._array("sigma")

    @property
    def drift(self) -> np.ndarray:
        """Drift of the reduced coordinate."""
        if self.kind is ModelKind.GBM:
            return self.mu - 0.5 * self.sigma**2
        return self.mu

    def distance(self, i: int, value):
        """Reduced distance to the barrier of firm ``i`` (vectorised in value)."""
        k = self.firms[i].barrier
        value = np.asarray(value, dtype=float)
        if self.kind is ModelKind.GBM:
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.log(value) - math.log(k)
        return value - k

    def value(self, i: int, distance):
        """Inverse of :meth:`distance`."""
        k = self.firms[i].barrier
        distance = np.asarray(distance, dtype=float)
        if self.kind is ModelKind.GBM:
            return k * np.exp(distance)
        return k + distance

    def with_contagion(self, contagion) -> "Portfolio":
        return Portfolio(self.firms, np.asarray(contagion, dtype=float), self.kind)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "firms": [
                {"id": f.id, "x0": f.x0, "barrier": f.barrier, "mu": f.mu, "sigma": f.sigma}
                for f in self.firms
            ],
            "contagion": self.contagion.tolist(),
        }


def validate_portfolio(p: Portfolio) -> list[Violation]:
    """Return every violated portfolio invariant; an empty list means valid."""
    out: list[Violation] = []
    if p.n < 1:
        out.append(Violation(None, "firms", "at least one firm"))
    for pos, f in enumerate(p.firms):
        if f.id != pos:
            out.append(Violation(f.id, "id", "ids dense 0..n-1 in order"))
        values = (f.x0, f.barrier, f.mu, f.sigma)
        if not all(math.isfinite(v) for v in values):
            out.append(Violation(f.id, "params", "finite values"))
            continue
        if not f.x0 > f.barrier:
            out.append(Violation(f.id, "x0", "x0 > barrier"))
        if not f.sigma > 0:
            out.append(Violation(f.id, "sigma", "sigma > 0"))
        if p.kind is ModelKind.GBM:
            if not f.x0 > 0:
                out.append(Violation(f.id, "x0", "x0 > 0 for gbm"))
            if not f.barrier > 0:
                out.append(Violation(f.id, "barrier", "barrier > 0 for gbm"))
    c = p.contagion
    if c.shape != (p.n, p.n):
        out.append(Violation(None, "contagion", f"shape {p.n}x{p.n}"))
        return out
    if not np.all(np.isfinite(c)):
        out.append(Violation(None, "contagion", "finite entries"))
        return out
    for i, j in zip(*np.nonzero(c < 0)):
        out.append(Violation(int(j), "contagion", f"entry ({i},{j}) >= 0"))
    for i in range(p.n):
        if c[i, i] != 0:
            out.append(Violation(i, "contagion", "diagonal zero"))
    return out


def reduce_to_abm(p: Portfolio, i: int, x: float) -> AbmCoord:
    """Reduced (distance, drift, vol) of firm ``i`` currently at value ``x``."""
    f = p.firms[i]
    if not x > f.barrier:
        raise ValueError(f"firm {i}: value {x} is not above barrier {f.barrier}")
    if p.kind is ModelKind.GBM:
        return AbmCoord(math.log(x) - math.log(f.barrier), f.mu - 0.5 * f.sigma**2, f.sigma)
    return AbmCoord(x - f.barrier, f.mu, f.sigma)


def apply_default_jumps(
    values: dict[int, float], defaulted: Iterable[int], contagion: np.ndarray
) -> dict[int, float]:
    """Subtract the contagion jumps of ``defaulted`` from each survivor value."""
    defaulted = list(defaulted)
    overlap = set(values).intersection(defaulted)
    if overlap:
        raise ValueError(f"survivors overlap defaulted set: {sorted(overlap)}")
    if not defaulted:
        return dict(values)
    c = np.asarray(contagion, dtype=float)
    return {i: v - float(c[defaulted, i].sum()) for i, v in values.items()}


_TOP_KEYS = {"kind", "firms", "contagion"}
_FIRM_KEYS = {"id", "x0", "barrier", "mu", "sigma"}


def _number(obj, where: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {obj!r}")
    return float(obj)


def portfolio_from_dict(data: dict) -> Portfolio:
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    missing = _TOP_KEYS - set(data)
    if missing:
        raise ConfigError(f"missing keys: {sorted(missing)}")
    try:
        kind = ModelKind(data["kind"])
    except ValueError:
        raise ConfigError(f"kind must be 'abm' or 'gbm', got {data['kind']!r}") from None
    if not isinstance(data["firms"], list):
        raise ConfigError("firms must be a list")
    firms = []
    for k, fd in enumerate(data["firms"]):
        if not isinstance(fd, dict):
            raise ConfigError(f"firms[{k}] must be an object")
        unknown = set(fd) - _FIRM_KEYS
        if unknown:
            raise ConfigError(f"firms[{k}]: unknown keys: {sorted(unknown)}")
        missing = _FIRM_KEYS - set(fd)
        if missing:
            raise ConfigError(f"firms[{k}]: missing keys: {sorted(missing)}")
        fid = fd["id"]
        if isinstance(fid, bool) or not isinstance(fid, int):
            raise ConfigError(f"firms[{k}].id must be an integer")
        firms.append(
            FirmParams(
                fid,
                _number(fd["x0"], f"firms[{k}].x0"),
                _number(fd["barrier"], f"firms[{k}].barrier"),
                _number(fd["mu"], f"firms[{k}].mu"),
                _number(fd["sigma"], f"firms[{k}].sigma"),
            )
        )
    rows = data["contagion"]
    if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
        raise ConfigError("contagion must be a list of rows")
    if len({len(r) for r in rows}) > 1:
        raise ConfigError("contagion rows have unequal length")
    c = [[_number(v, f"contagion[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(rows)]
    arr = np.array(c, dtype=float).reshape(len(c), len(c[0]) if c else 0)
    return Portfolio(tuple(firms), arr, kind)


def load_portfolio(path: str | Path) -> Portfolio:
    """Parse a UTF-8 JSON portfolio config; raises :class:`ConfigError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
        data = json.loads(text)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(str(exc)) from exc
    return portfolio_from_dict(data)


def dump_portfolio(p: Portfolio, path: str | Path) -> None:
    Path(path).write_text(json.dumps(p.to_dict(), indent=2) + "\n", encoding="utf-8")
