import math

import numpy as np
import pytest
from scipy import stats

from domino.model import Portfolio
from domino.montecarlo import (
    BLOCK_SIZE,
    CascadeEvent,
    CascadeRecord,
    SimConfig,
    compare,
    default_threads,
    estimate,
    simulate,
    simulate_euler,
    simulate_exact_renewal,
    std_error,
)

P_N1 = 2 * stats.norm.sf(1.0)


def _dense(n=3, c=0.5):
    cm = np.full((n, n), c)
    np.fill_diagonal(cm, 0)
    return Portfolio.from_arrays([1.0] * n, [0.0] * n, [0.0] * n, [1.0] * n, cm)


def test_config_checks():
    with pytest.raises(ValueError):
        SimConfig(0, 1.0)
    with pytest.raises(ValueError):
        SimConfig(10, -1.0)
    with pytest.raises(ValueError):
        SimConfig(10, 1.0, scheme="milstein")
    with pytest.raises(ValueError):
        SimConfig(10, 1.0, scheme="euler", dt=2.0)
    with pytest.raises(ValueError):
        SimConfig(10, 1.0, seed=-1)
    assert SimConfig(10, 2.0).step == 2.0 / 1024


def test_std_error():
    assert std_error(0.5, 10_000) == pytest.approx(0.005)
    assert std_error(0.0, 10) == 0.0


def test_compare_boundary_and_mismatch():
    same = compare({"a": (0.4, 0.0)}, {"a": 0.4}, 10_000)
    assert same.ok and same.z[0] == 0.0
    edge = compare({"a": (0.5, 0.0)}, {"a": 0.53}, se={"a": 0.01})
    assert edge.z[0] == pytest.approx(-3.0) and not edge.ok
    inside = compare({"a": (0.5, 0.0)}, {"a": 0.529}, se={"a": 0.01})
    assert inside.ok
    allowed = compare({"a": (0.5, 1e-3)}, {"a": 0.53}, se={"a": 0.01})
    assert allowed.ok
    with pytest.raises(ValueError):
        compare({"a": (0.1, 0.0)}, {"b": 0.1}, 100)
    with pytest.raises(ValueError):
        compare({"a": (0.1, 0.0)}, {"a": 0.1})
    # frequency 0 still gets a one-path standard error
    zero = compare({"a": (0.0, 0.0)}, {"a": 0.0}, 100)
    assert zero.se[0] == pytest.approx(0.01) and zero.ok
    rows = edge.rows()
    assert rows[0]["label"] == "a" and rows[0]["pass"] is False


def test_estimate_on_hand_records():
    recs = [
        CascadeRecord(0, (CascadeEvent(0.2, (0,), {}, {}), CascadeEvent(0.7, (1, 2), {}, {})), False),
        CascadeRecord(1, (CascadeEvent(0.9, (1,), {}, {}),), True),
        CascadeRecord(2, (), True),
        CascadeRecord(3, (CascadeEvent(1.5, (0, 1, 2), {}, {}),), False),
    ]
    st = estimate(recs, 1.0, taus=(1, 2), firm_sets=[(1,), (0, 2)], n_firms=3)
    assert list(st.n_t_counts) == [2, 1, 0, 1]
    assert st.tau_tail == {1: 0.5, 2: 0.75}
    assert st.set_survival == {(1,): 0.5, (0, 2): 0.75}
    assert list(st.firm_survival) == [0.75, 0.5, 0.75]


@pytest.mark.parametrize("scheme", ["exact_renewal", "euler"])
def test_reproducible_across_threads(scheme):
    p = _dense()
    n = 2 * BLOCK_SIZE + 123
    dt = 2**-6 if scheme == "euler" else None
    runs = [simulate(p, SimConfig(n, 1.0, seed=9, scheme=scheme, dt=dt, threads=k)) for k in (1, 2, 8)]
    for r in runs[1:]:
        assert np.array_equal(r.times, runs[0].times)
        assert np.array_equal(r.sets, runs[0].sets)
    other = simulate(p, SimConfig(n, 1.0, seed=10, scheme=scheme, dt=dt))
    assert not np.array_equal(other.times, runs[0].times)


def test_default_threads(monkeypatch):
    monkeypatch.delenv("DOMINO_THREADS", raising=False)
    assert default_threads() == 1
    monkeypatch.setenv("DOMINO_THREADS", "4")
    assert default_threads() == 4


def test_single_firm_exact():
    p = Portfolio.from_arrays([1.0], [0.0], [0.0], [1.0], [[0.0]])
    r = simulate(p, SimConfig(200_000, 1.0, seed=1))
    q = np.mean(np.isfinite(r.times[:, 0]))
    assert abs(q - P_N1) <= 3 * std_error(P_N1, 200_000)


def test_records_structure():
    p = _dense(4, 0.4)
    cfg = SimConfig(3000, 2.0, seed=4, keep_values=True)
    res = simulate(p, cfg)
    assert res.pre is not None
    for rec in res.records():
        assert rec.n_star <= p.n
        times = [e.time for e in rec.events]
        assert times == sorted(times) and all(0 < t <= 2.0 for t in times)
        seen = set()
        for e in rec.events:
            assert not seen & set(e.defaults)
            seen |= set(e.defaults)
            # survivors moved down by exactly the jumps of this event
            for i, v in e.survivor_values.items():
                drop = sum(p.contagion[j, i] for j in e.defaults)
                assert v == pytest.approx(e.pre_values[i] - drop)
                assert e.pre_values[i] > drop
        assert rec.censored == (len(seen) < p.n)


def test_exact_vs_euler_agree_on_dense_pair():
    p = _dense(2, 1.0)
    n = 100_000
    a = estimate(simulate(p, SimConfig(n, 1.0, seed=1)), 1.0)
    b = estimate(simulate(p, SimConfig(n, 1.0, seed=2, scheme="euler", dt=2**-8)), 1.0)
    se = np.sqrt(std_error(a.n_t, n) ** 2 + std_error(b.n_t, n) ** 2)
    assert np.all(np.abs(a.n_t - b.n_t) <= 3 * se)


def test_euler_without_bridge_is_biased_low():
    p = Portfolio.from_arrays([1.0], [0.0], [0.0], [1.0], [[0.0]])
    n = 200_000
    r = simulate(p, SimConfig(n, 1.0, seed=3, scheme="euler", dt=2**-5, bridge_correction=False))
    q = estimate(r, 1.0).n_t[1]
    assert (q - P_N1) / std_error(q, n) < -3


def test_gbm_survival_matches_closed_form():
    p = Portfolio.from_arrays([1.0], [0.6], [0.05], [0.3], [[0.0]], kind="gbm")
    from domino.passage import survival_arr

    d, m, s = math.log(1 / 0.6), 0.05 - 0.045, 0.3
    expect = 1 - float(survival_arr(d, m, s, 1.5))
    n = 100_000
    q = estimate(simulate(p, SimConfig(n, 1.5, seed=6)), 1.5).n_t[1]
    assert abs(q - expect) <= 3 * std_error(expect, n)


def test_iterator_fronts():
    p = _dense(2, 0.3)
    recs = list(simulate_exact_renewal(p, SimConfig(50, 1.0)))
    assert len(recs) == 50 and recs[0].path == 0
    with pytest.raises(ValueError):
        simulate_euler(p, SimConfig(50, 1.0))
    assert len(list(simulate_euler(p, SimConfig(50, 1.0, scheme="euler", dt=0.1)))) == 50
