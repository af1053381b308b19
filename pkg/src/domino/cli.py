"""Command-line front end: ``domino {validate,analytic,simulate,compare}``.

stdout carries only the primary CSV table.  Run metadata goes to a separate
JSON manifest (``--manifest``), diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from importlib import metadata
from typing import Sequence

from .analytic import AnalyticEngine, GuardError, QuadratureSpec
from .model import ConfigError, Portfolio, load_portfolio, validate_portfolio
from .montecarlo import SimConfig, compare, default_threads, estimate, simulate, std_error

EXIT_OK, EXIT_FAIL, EXIT_PARSE = 0, 1, 2


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def config_hash(p: Portfolio) -> str:
    canon = json.dumps(p.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


@dataclass
class RunManifest:
    subcommand: str
    tool_version: str
    config_hash: str
    seed: int | None
    started: str
    finished: str | None = None
    settings: dict = field(default_factory=dict)
    exit_code: int | None = None

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- labels ------------------------------------------------------------------


def nt_label(k: int) -> str:
    return f"N_t={k}"


def tau_label(m: int) -> str:
    return f"tau({m})>t"


def survive_label(ids: Sequence[int]) -> str:
    return "survive(" + " ".join(str(i) for i in ids) + ")"


def _parse_ids(text: str, n: int) -> tuple[int, ...]:
    if text == "all":
        return tuple(range(n))
    try:
        ids = tuple(sorted({int(tok) for tok in text.replace(",", " ").split()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad firm id list {text!r}") from None
    if not ids or any(not 0 <= i < n for i in ids):
        raise argparse.ArgumentTypeError(f"firm ids must lie in 0..{n - 1}")
    return ids


# --- shared option groups -------------------------------------------------------


def _add_quad_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("quadrature")
    d = QuadratureSpec()
    g.add_argument("--time-nodes", type=int, default=d.time_nodes)
    g.add_argument("--space-nodes", type=int, default=d.space_nodes, help="Gauss-Legendre nodes per spatial panel")
    g.add_argument("--tail-quantile", type=float, default=d.tail_quantile)
    g.add_argument("--max-depth", type=int, default=None, help="cascade depth guard (default: no truncation)")
    g.add_argument("--quad-method", choices=("tensor", "qmc"), default=d.method)
    g.add_argument("--qmc-points", type=int, default=d.qmc_points)


def _add_sim_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("simulation")
    g.add_argument("--paths", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scheme", choices=("exact", "euler"), default="exact")
    g.add_argument("--dt", type=float, default=None, help="euler step (default t * 2^-10)")
    g.add_argument("--no-bridge", action="store_true", help="disable the euler bridge crossing test")
    g.add_argument("--threads", type=int, default=None, help="simulator workers (env DOMINO_THREADS)")


def _quad(args) -> QuadratureSpec:
    return QuadratureSpec(
        time_nodes=args.time_nodes,
        space_nodes=args.space_nodes,
        tail_quantile=args.tail_quantile,
        max_cascade_depth=args.max_depth,
        method=args.quad_method,
        qmc_points=args.qmc_points,
    )


def _sim(args) -> SimConfig:
    threads = args.threads if args.threads is not None else default_threads()
    return SimConfig(
        n_paths=args.paths,
        horizon=args.t,
        seed=args.seed,
        scheme="exact_renewal" if args.scheme == "exact" else "euler",
        dt=args.dt,
        bridge_correction=not args.no_bridge,
        threads=threads,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="domino", description="Default contagion with domino effects.")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a portfolio config")
    v.add_argument("config")

    a = sub.add_parser("analytic", help="semi-analytic probabilities")
    a.add_argument("config")
    a.add_argument("--t", type=float, required=True)
    a.add_argument("--query", nargs="+", default=["nt"], metavar="Q", help="nt | tau <m> | survive <ids|all>")
    a.add_argument("--manifest", default=None)
    _add_quad_flags(a)

    s = sub.add_parser("simulate", help="Monte Carlo estimates")
    s.add_argument("config")
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--events", default=None, help="write per-event JSONL here")
    s.add_argument("--manifest", default=None)
    _add_sim_flags(s)

    c = sub.add_parser("compare", help="analytic values against Monte Carlo (z-scores)")
    c.add_argument("config")
    c.add_argument("--t", type=float, required=True)
    c.add_argument("--taus", type=int, nargs="*", default=None, help="m values for P(tau(m)>t) (default 1..n)")
    c.add_argument("--survive", action="append", default=None, help="firm set for joint survival (repeatable)")
    c.add_argument("--limit", type=float, default=3.0)
    c.add_argument("--manifest", default=None)
    # test hook: flips the sign of the contagion matrix seen by the simulator
    c.add_argument("--corrupt-sign", action="store_true", help=argparse.SUPPRESS)
    _add_quad_flags(c)
    _add_sim_flags(c)
    return ap


# --- subcommands ---------------------------------------------------------------------


class _Abort(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load(path: str) -> Portfolio:
    try:
        p = load_portfolio(path)
    except (ConfigError, OSError) as exc:
        raise _Abort(EXIT_PARSE, f"error: {exc}") from None
    bad = validate_portfolio(p)
    if bad:
        raise _Abort(EXIT_FAIL, "\n".join(str(b) for b in bad))
    return p


def cmd_validate(args, out) -> int:
    try:
        p = load_portfolio(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    bad = validate_portfolio(p)
    for b in bad:
        print(b, file=out)
    return EXIT_FAIL if bad else EXIT_OK


def _parse_queries(tokens: list[str], n: int) -> list[tuple]:
    out, i = [], 0
    while i < len(tokens):
        q = tokens[i]
        if q == "nt":
            out.append(("nt",))
            i += 1
        elif q == "tau" and i + 1 < len(tokens):
            m = int(tokens[i + 1])
            if not 1 <= m <= n:
                raise _Abort(EXIT_FAIL, f"error: tau index must lie in 1..{n}")
            out.append(("tau", m))
            i += 2
        elif q == "survive" and i + 1 < len(tokens):
            try:
                out.append(("survive", _parse_ids(tokens[i + 1], n)))
            except argparse.ArgumentTypeError as exc:
                raise _Abort(EXIT_FAIL, f"error: {exc}") from None
            i += 2
        else:
            raise _Abort(EXIT_FAIL, f"error: bad query {' '.join(tokens[i:])!r}")
    return out


def analytic_rows(engine: AnalyticEngine, queries, t: float) -> list[tuple[str, float, float, str]]:
    rows = []
    for q in queries:
        if q[0] == "nt":
            tab = engine.prob_N_t(t)
            for k, (prob, err) in enumerate(zip(tab.probabilities, tab.errors)):
                rows.append((nt_label(k), float(prob), float(err), tab.method))
        elif q[0] == "tau":
            e = engine.prob_tau_m_tail(q[1], t)
            rows.append((tau_label(q[1]), e.value, e.error, e.method))
        else:
            e = engine.joint_survival(q[1], t)
            rows.append((survive_label(q[1]), e.value, e.error, e.method))
    return rows


def cmd_analytic(args, out) -> tuple[int, dict]:
    p = _load(args.config)
    quad = _quad(args)
    queries = _parse_queries(args.query, p.n)
    try:
        rows = analytic_rows(AnalyticEngine(p, quad), queries, args.t)
    except GuardError as exc:
        raise _Abort(EXIT_FAIL, f"guard violation: {exc}") from None
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label", "probability", "tolerance", "method"])
    for label, prob, tol, method in rows:
        w.writerow([label, _fmt(prob), _fmt(tol), method])
    return EXIT_OK, {"t": args.t, "queries": args.query, "quadrature": asdict(quad)}


def _sim_table(stats, n: int, taus, sets) -> list[tuple[str, float]]:
    rows = [(nt_label(k), float(v)) for k, v in enumerate(stats.n_t)]
    rows += [(tau_label(m), stats.tau_tail[m]) for m in taus]
    rows += [(survive_label(ids), stats.set_survival[ids]) for ids in sets]
    return rows


def _write_events(path: str, result) -> None:
    with open(path, "w") as fh:
        for rec in result.records():
            for j, ev in enumerate(rec.events):
                row = {
                    "path": rec.path,
                    "j": j,
                    "time": ev.time,
                    "defaults": list(ev.defaults),
                    "survivor_values": [ev.survivor_values[i] for i in sorted(ev.survivor_values)],
                }
                fh.write(json.dumps(row) + "\n")


def cmd_simulate(args, out) -> tuple[int, dict]:
    p = _load(args.config)
    try:
        cfg = _sim(args)
    except ValueError as exc:
        raise _Abort(EXIT_FAIL, f"error: {exc}") from None
    if args.events:
        cfg = SimConfig(**{**asdict(cfg), "keep_values": True})
    result = simulate(p, cfg)
    taus = tuple(range(1, p.n + 1))
    sets = [(i,) for i in range(p.n)]
    stats = estimate(result, args.t, taus=taus, firm_sets=sets, n_firms=p.n)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label", "estimate", "se"])
    for label, est in _sim_table(stats, p.n, taus, sets):
        w.writerow([label, _fmt(est), _fmt(std_error(est, cfg.n_paths))])
    if args.events:
        _write_events(args.events, result)
    settings = asdict(cfg)
    settings.pop("threads")
    return EXIT_OK, {"t": args.t, "simulation": settings, "threads": cfg.threads, "ties": result.ties}


def cmd_compare(args, out) -> tuple[int, dict]:
    p = _load(args.config)
    quad = _quad(args)
    try:
        cfg = _sim(args)
    except ValueError as exc:
        raise _Abort(EXIT_FAIL, f"error: {exc}") from None
    taus = tuple(range(1, p.n + 1)) if args.taus is None else tuple(args.taus)
    if any(not 1 <= m <= p.n for m in taus):
        raise _Abort(EXIT_FAIL, f"error: tau index must lie in 1..{p.n}")
    try:
        sets = [(i,) for i in range(p.n)] if args.survive is None else [_parse_ids(s, p.n) for s in args.survive]
    except argparse.ArgumentTypeError as exc:
        raise _Abort(EXIT_FAIL, f"error: {exc}") from None
    queries = [("nt",)] + [("tau", m) for m in taus] + [("survive", s) for s in sets]
    try:
        arows = analytic_rows(AnalyticEngine(p, quad), queries, args.t)
    except GuardError as exc:
        raise _Abort(EXIT_FAIL, f"guard violation: {exc}") from None

    sim_p = p.with_contagion(-p.contagion) if args.corrupt_sign else p
    result = simulate(sim_p, cfg)
    stats = estimate(result, args.t, taus=taus, firm_sets=sets, n_firms=p.n)
    mc = dict(_sim_table(stats, p.n, taus, sets))
    report = compare({lab: (v, tol) for lab, v, tol, _ in arows}, mc, cfg.n_paths, limit=args.limit)

    w = csv.writer(out, lineterminator="\n")
    w.writerow(["label", "analytic", "mc", "se", "tolerance", "z", "pass"])
    for r in report.rows():
        w.writerow([r["label"], _fmt(r["analytic"]), _fmt(r["mc"]), _fmt(r["se"]), _fmt(r["tolerance"]),
                    format(r["z"], ".6f"), "1" if r["pass"] else "0"])
    settings = asdict(cfg)
    settings.pop("threads")
    info = {"t": args.t, "quadrature": asdict(quad), "simulation": settings, "threads": cfg.threads,
            "corrupt_sign": bool(args.corrupt_sign)}
    return (EXIT_OK if report.ok else EXIT_FAIL), info


_COMMANDS = {"analytic": cmd_analytic, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args, out)
    started = _now()
    try:
        code, settings = _COMMANDS[args.command](args, out)
    except _Abort as exc:
        print(exc, file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.manifest:
        RunManifest(
            subcommand=args.command,
            tool_version=tool_version(),
            config_hash=config_hash(load_portfolio(args.config)),
            seed=getattr(args, "seed", None),
            started=started,
            finished=_now(),
            settings=settings,
            exit_code=code,
        ).write(args.manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
