import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from domino.analytic import (
    AnalyticEngine,
    StageState,
    GuardError,
    QuadratureSpec,
    cascade_sequence_integral,
    g_mass,
    h_full,
    h_sub_kernel,
    joint_survival,
    prob_N_t,
    prob_tau_m_tail,
)
from domino.domain import Box
from domino.model import Portfolio
from domino.passage import PassageParams, fp_density, killed_interval_mass, survival


def _random_portfolio(rng, n, contagion=True, kind="abm"):
    x0 = rng.uniform(0.6, 1.6, n)
    k = rng.uniform(0.0, 0.3, n) if kind == "abm" else rng.uniform(0.3, 0.5, n)
    mu = rng.uniform(-0.2, 0.2, n)
    sigma = rng.uniform(0.5, 1.2, n) if kind == "abm" else rng.uniform(0.2, 0.5, n)
    c = rng.uniform(0.1, 0.8, (n, n)) if contagion else np.zeros((n, n))
    np.fill_diagonal(c, 0.0)
    return Portfolio.from_arrays(x0, k, mu, sigma, c, kind=kind)


def _pp(p, i, value):
    return PassageParams(float(p.distance(i, value)), float(p.drift[i]), float(p.sigma[i]))


def _fp(p, i, value, t):
    return fp_density(_pp(p, i, value), t)


def _mass(p, i, value, lo, hi, t):
    a = float(p.distance(i, lo)) if lo > p.barrier[i] else 0.0
    b = math.inf if math.isinf(hi) else float(p.distance(i, hi))
    return killed_interval_mass(_pp(p, i, value), a, b, t)


def _surv(p, i, value, t):
    return survival(_pp(p, i, value), t)


@pytest.mark.parametrize("kind", ["abm", "gbm"])
def test_h_full_single_firm_is_passage_density(kind):
    p = _random_portfolio(np.random.default_rng(1), 3, kind=kind)
    for i in range(3):
        assert h_full(p, (i,), {i: p.x0[i]}, 0.7) == _fp(p, i, p.x0[i], 0.7)


def test_h_full_pair_closed_form():
    p = _random_portfolio(np.random.default_rng(2), 2)
    x, k, c = p.x0, p.barrier, p.contagion
    for t in (0.2, 1.0, 3.0):
        expect = _fp(p, 0, x[0], t) * _mass(p, 1, x[1], k[1], k[1] + c[0, 1], t)
        expect += _fp(p, 1, x[1], t) * _mass(p, 0, x[0], k[0], k[0] + c[1, 0], t)
        assert h_full(p, (0, 1), dict(enumerate(x)), t) == pytest.approx(expect, rel=1e-12, abs=1e-300)


def test_h_full_vanishes_without_contagion():
    p = _random_portfolio(np.random.default_rng(3), 3, contagion=False)
    vals = dict(enumerate(p.x0))
    for I in [(0, 1), (1, 2), (0, 1, 2)]:
        for t in (0.1, 0.5, 2.0):
            assert abs(h_full(p, I, vals, t)) <= 1e-10


def test_first_event_density_partition():
    # every first event either takes all of I or some proper subset
    p = _random_portfolio(np.random.default_rng(4), 3)
    I = (0, 1, 2)
    vals = dict(enumerate(p.x0))
    eng = AnalyticEngine(p)
    for t in (0.3, 1.1):
        parts = eng.h_full(I, vals, t)
        for r in (1, 2):
            for J in itertools.combinations(I, r):
                parts += eng.h_sub_kernel(I, J, vals, t)
        total = sum(
            _fp(p, i, vals[i], t) * math.prod(_surv(p, j, vals[j], t) for j in I if j != i) for i in I
        )
        assert parts == pytest.approx(total, rel=1e-10)


def test_h_sub_kernel_box_and_g_mass():
    p = _random_portfolio(np.random.default_rng(5), 2)
    vals = dict(enumerate(p.x0))
    t = 0.6
    k1, c01 = p.barrier[1], p.contagion[0, 1]
    box = Box((1,), (k1 + 0.1,), (k1 + 0.4,))
    expect = _fp(p, 0, vals[0], t) * _mass(p, 1, vals[1], k1 + 0.1 + c01, k1 + 0.4 + c01, t)
    assert h_sub_kernel(p, (0, 1), (0,), vals, t, box=box) == pytest.approx(expect, rel=1e-12)
    assert g_mass(p, (0, 1), (0,), vals, t) == pytest.approx(
        _mass(p, 1, vals[1], k1 + c01, math.inf, t), rel=1e-12
    )
    with pytest.raises(ValueError):
        h_sub_kernel(p, (0, 1), (0,), vals, t, box=Box((1,), (k1 - 0.1,), (k1 + 1,)))


def test_single_firm_distribution():
    p = Portfolio.from_arrays([1.0], [0.0], [0.0], [1.0], [[0.0]])
    tab = prob_N_t(p, 1.0)
    p1 = 2 * stats.norm.sf(1.0)
    assert tab.probabilities == pytest.approx([1 - p1, p1], abs=1e-12)
    assert tab.tolerance <= 1e-8
    assert tab.labels == ["0", "1"]


def test_independent_firms_give_poisson_binomial():
    p = _random_portfolio(np.random.default_rng(6), 3, contagion=False)
    t = 1.3
    q = [1 - _surv(p, i, p.x0[i], t) for i in range(3)]
    expect = np.zeros(4)
    for bits in itertools.product((0, 1), repeat=3):
        expect[sum(bits)] += math.prod(qi if b else 1 - qi for qi, b in zip(q, bits))
    tab = prob_N_t(p, t)
    assert np.all(np.abs(tab.probabilities - expect) <= tab.errors + 1e-8)


@pytest.mark.parametrize("kind", ["abm", "gbm"])
def test_normalization_and_reductions(kind):
    p = _random_portfolio(np.random.default_rng(7), 2, kind=kind)
    eng = AnalyticEngine(p)
    tab = eng.prob_N_t(1.0)
    assert abs(tab.probabilities.sum() - 1) <= max(tab.tolerance, 1e-9)
    none_hit = math.prod(_surv(p, i, p.x0[i], 1.0) for i in range(2))
    assert eng.joint_survival((0, 1), 1.0).value == pytest.approx(none_hit, rel=1e-10)
    assert eng.prob_tau_m_tail(1, 1.0).value == pytest.approx(none_hit, rel=1e-10)
    assert eng.prob_tau_m_tail(2, 1.0).value == pytest.approx(
        none_hit + sum(eng.sequence_integral([J], 1.0).value for J in [(0,), (1,), (0, 1)]), rel=1e-12
    )


def test_first_event_marginal_matches_quadrature():
    p = _random_portfolio(np.random.default_rng(8), 2)
    est = cascade_sequence_integral(p, [(0,)], 1.0, terminal="none")
    x, k, c = p.x0, p.barrier, p.contagion
    f = lambda u: _fp(p, 0, x[0], u) * _mass(p, 1, x[1], k[1] + c[0, 1], math.inf, u)
    ref, _ = integrate.quad(f, 0, 1.0, epsabs=1e-13)
    assert est.value == pytest.approx(ref, abs=max(est.error, 1e-9))


def test_two_event_sequence_matches_nested_quadrature():
    # firm 0 defaults alone at u, firm 1 survives the jump and then defaults by t
    p = Portfolio.from_arrays([1.0, 1.2], [0.0, 0.0], [0.1, -0.1], [0.9, 1.1], [[0, 0.4], [0.3, 0]])
    t = 1.0
    est = cascade_sequence_integral(p, [(0,), (1,)], t)
    m1, s1, c = p.drift[1], p.sigma[1], p.contagion[0, 1]

    def inner(u):
        from domino.passage import killed_density

        pp = _pp(p, 1, p.x0[1])
        g = lambda y: killed_density(pp, y, u) * (1 - survival(PassageParams(y - c, m1, s1), t - u))
        val, _ = integrate.quad(g, c, np.inf, epsabs=1e-13, limit=200)
        return _fp(p, 0, p.x0[0], u) * val

    ref, _ = integrate.quad(inner, 0, t, epsabs=1e-12, limit=200)
    assert est.value == pytest.approx(ref, abs=1e-8)
    assert est.error < 1e-6


def test_qmc_agrees_with_tensor():
    p = _random_portfolio(np.random.default_rng(9), 2)
    a = cascade_sequence_integral(p, [(0,), (1,)], 1.0)
    b = cascade_sequence_integral(p, [(0,), (1,)], 1.0, quad=QuadratureSpec(method="qmc", qmc_points=2**12))
    assert b.method == "qmc"
    assert abs(a.value - b.value) <= a.error + 5 * b.error + 1e-9


def test_start_state_override():
    p = _random_portfolio(np.random.default_rng(10), 2, contagion=False)
    start = {1: float(p.barrier[1] + 0.3)}
    est = cascade_sequence_integral(p, [], 0.5, start=start)
    assert est.value == pytest.approx(_surv(p, 1, start[1], 0.5), rel=1e-12)


def test_sequence_argument_checks():
    p = _random_portfolio(np.random.default_rng(11), 3)
    eng = AnalyticEngine(p)
    with pytest.raises(ValueError):
        eng.sequence_integral([(0,), (0, 1)], 1.0)
    with pytest.raises(ValueError):
        eng.sequence_integral([()], 1.0)
    with pytest.raises(ValueError):
        eng.sequence_integral([(0,)], 1.0, terminal="all")
    with pytest.raises(ValueError):
        eng.sequence_integral([(0,)], 0.0)


def test_guards():
    p = _random_portfolio(np.random.default_rng(12), 3)
    eng = AnalyticEngine(p, QuadratureSpec(max_cascade_depth=1))
    with pytest.raises(GuardError, match="depth"):
        eng.sequence_integral([(0,), (1,)], 1.0)
    with pytest.raises(GuardError, match="depth"):
        eng.prob_tau_m_tail(3, 1.0)
    assert "depth<=1" in eng.prob_N_t(0.5).method
    big = _random_portfolio(np.random.default_rng(13), 7)
    with pytest.raises(GuardError, match="size"):
        prob_N_t(big, 1.0)
    with pytest.raises(ValueError):
        AnalyticEngine(Portfolio.from_arrays([0.0], [0.0], [0.0], [1.0], [[0.0]]))


def test_functional_front_end():
    p = _random_portfolio(np.random.default_rng(14), 2)
    eng = AnalyticEngine(p)
    assert joint_survival(p, (1,), 1.0).value == pytest.approx(eng.joint_survival((1,), 1.0).value)
    assert prob_tau_m_tail(p, 2, 1.0).value == pytest.approx(eng.prob_tau_m_tail(2, 1.0).value)


def test_g_mass_against_2d_quadrature():
    p = _random_portfolio(np.random.default_rng(15), 3)
    vals = {1: 1.1, 2: 0.9}
    t = 0.8
    box = AnalyticEngine(p).g_mass((0, 1, 2), (0,), vals, t)
    from domino.passage import killed_density

    lo = [float(p.distance(i, p.barrier[i] + p.contagion[0, i])) for i in (1, 2)]
    pp = [_pp(p, i, vals[i]) for i in (1, 2)]
    ref, _ = integrate.dblquad(
        lambda y2, y1: killed_density(pp[0], y1, t) * killed_density(pp[1], y2, t),
        lo[0], 12.0, lo[1], 12.0, epsabs=1e-12,
    )
    assert box == pytest.approx(ref, abs=1e-8)


def test_g_mass_limits():
    p = _random_portfolio(np.random.default_rng(16), 2, contagion=False)
    vals = dict(enumerate(p.x0))
    assert g_mass(p, (0, 1), (0,), vals, 1.0) == pytest.approx(_surv(p, 1, vals[1], 1.0), rel=1e-12)
    huge = p.with_contagion([[0.0, 1e3], [0.0, 0.0]])
    assert g_mass(huge, (0, 1), (0,), vals, 1.0) == 0.0


def test_stage_state_restart():
    p = _random_portfolio(np.random.default_rng(17), 2, contagion=False)
    eng = AnalyticEngine(p)
    state = StageState({1: float(p.barrier[1] + 0.4)}, elapsed=0.3)
    assert state.survivors == (1,)
    est = eng.sequence_integral([], 1.0, start=state)
    assert est.value == pytest.approx(_surv(p, 1, p.barrier[1] + 0.4, 0.7), rel=1e-12)
    with pytest.raises(ValueError):
        eng.sequence_integral([], 0.2, start=state)
    with pytest.raises(ValueError):
        eng.sequence_integral([], 1.0, start=StageState({1: float(p.barrier[1])}))
