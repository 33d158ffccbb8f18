import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from martingale_clt import embedding as Em
from martingale_clt import engine as E
from martingale_clt import measures as M


def test_iid_sum_examples():
    rng = np.random.default_rng(0)
    assert np.all(Em.sample_sn_iid(M.point_mass([0.0, 0.0]), 9, rng) == 0)
    m = M.make_lattice_ball(1, 1.0, 1)
    x = Em.sample_sn_iid(m, 1, rng)
    assert x[0] in (-1.0, 0.0, 1.0)
    s = Em.sample_sn_iid_many(M.two_point(1.0), 4, 100_000, rng)[:, 0]
    assert s.var() == pytest.approx(1.0, rel=0.02)
    with pytest.raises(ValueError):
        Em.sample_sn_iid(m, 0, rng)


def test_bounded_bound_example():
    assert Em.theorem_bounded_w2_bound(1.0, 1, 16) == pytest.approx(math.sqrt(40) / 4)
    assert Em.theorem_bounded_w2_bound(2.0, 4, 1) == pytest.approx(2 * 2 * math.sqrt(32))


def test_main_rhs_closed_forms():
    t = np.linspace(0, 20, 400_001)
    e = np.exp(-t)
    rep = Em.main_rhs_from_arrays(t, e, e, 10)
    assert rep.rhs_integral == pytest.approx(math.log(40) / 10 + 0.1 - 4 * math.exp(-20), abs=1e-6)
    assert rep.crossover_time == pytest.approx(math.log(40), abs=1e-4)
    assert Em.main_rhs_from_arrays(t, 0 * e, 0 * e, 10).rhs_integral == 0.0
    t = np.linspace(0, 1, 101)
    for d in (1, 3):
        I = np.broadcast_to(np.eye(d), (101, d, d))
        for n in (1, 8, 64):
            assert Em.main_rhs_from_arrays(t, I, I, n).rhs_integral == pytest.approx(min(d / n, 4 * d))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 3))
def test_main_rhs_nonincreasing_in_n(seed, d):
    rng = np.random.default_rng(seed)
    L = 30
    G = rng.standard_normal((L, d, d))
    G = G @ np.swapaxes(G, 1, 2)
    G2, G4 = G @ G, G @ G @ G @ G
    t = np.sort(rng.random(L))
    vals = [Em.main_rhs_from_arrays(t, G2, G4, n).rhs_integral for n in (1, 2, 5, 17, 100)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_tau_statistics_examples():
    with pytest.raises(ValueError):
        Em.tau_statistics(np.ones(999), 1.0)
    ts = Em.tau_statistics(np.full(1000, 0.0), 1.0)
    assert ts.freq[0] == 1.0 and np.all(ts.freq[1:] == 0) and ts.tails_dominated().all()
    ts = Em.tau_statistics(np.linspace(0, 3, 1000), 1.0)
    assert np.allclose(ts.thresholds[:3], [0, 2, 4]) and ts.freq[1] == pytest.approx(1 / 3, abs=2e-3)
    with pytest.raises(ValueError):
        Em.tau_statistics(np.zeros(1000), 1.0, collapsed=np.zeros(1000, bool))


def test_lattice_sum_law():
    x, p = Em.lattice_sum_law(M.two_point(1.0), 4, 2.0)
    assert np.allclose(x, [-2, -1, 0, 1, 2])
    assert np.allclose(p, stats.binom.pmf(range(5), 4, 0.5))
    x, p = Em.lattice_sum_law(M.make_lattice_ball(1, 1.0, 1), 25, 1.0)
    assert p.sum() == pytest.approx(1.0) and p @ x == pytest.approx(0.0, abs=1e-12)
    assert p @ x**2 == pytest.approx(2 / 3)


def _grid(m, pol, cfg):
    return E.gamma_moments(m, pol, cfg, None, 500)


def test_coupled_point_mass():
    m = M.point_mass([0.0])
    cfg = E.EngineConfig(seed=0)
    pairs = Em.sample_coupled_pairs(m, "projection", 8, 3, _grid(m, "projection", cfg), cfg)
    for p in pairs:
        assert p.s_n[0] == 0.0 and p.g[0] == 0.0


def test_coupled_marginal_is_exact_binomial():
    m = M.two_point(1.0)
    cfg = E.EngineConfig(dt_rel=4e-3, seed=1)
    pairs = Em.sample_coupled_pairs(m, "projection", 4, 1000, _grid(m, "projection", cfg), cfg)
    s = np.array([p.s_n[0] for p in pairs])
    x, p = Em.lattice_sum_law(m, 4, 2.0)
    counts = np.array([np.sum(np.isclose(s, v)) for v in x])
    assert counts.sum() == len(s)
    assert stats.chisquare(counts, 1000 * p).pvalue > 0.001


def test_coupled_gaussian_side():
    m = M.two_point(1.0)
    cfg = E.EngineConfig(dt_rel=4e-3, seed=2)
    mg = _grid(m, "projection", cfg)
    pairs = Em.sample_coupled_pairs(m, "projection", 16, 400, mg, cfg)
    g = np.array([p.g[0] for p in pairs])
    assert abs(g.mean()) <= 4 / math.sqrt(len(g))
    assert g.var(ddof=1) == pytest.approx(1.0, abs=4 * math.sqrt(2 / len(g)))
    cost, se = Em.coupling_cost(pairs)
    rhs = Em.theorem_main_rhs(mg, 16).rhs_integral
    assert cost <= rhs + 4 * se


def test_coupled_is_deterministic():
    m = M.make_lattice_ball(1, 1.0, 1)
    cfg = E.EngineConfig(dt_rel=4e-3, seed=3)
    mg = _grid(m, "capped", cfg)
    a = Em.sample_coupled_pairs(m, "capped", 4, 10, mg, cfg)
    b = Em.sample_coupled_pairs(m, "capped", 4, 10, mg, cfg)
    assert all(np.array_equal(p.s_n, q.s_n) and np.array_equal(p.g, q.g) for p, q in zip(a, b))


def test_coupled_rejects_mismatched_grid():
    m = M.two_point(1.0)
    cfg = E.EngineConfig(dt_rel=4e-3, seed=0)
    mg = _grid(m, "projection", cfg)
    with pytest.raises(ValueError):
        Em.sample_coupled_pairs(m, "capped", 4, 2, mg, cfg)
    with pytest.raises(ValueError):
        Em.sample_coupled_pairs(m, "projection", 4, 2, mg, E.EngineConfig(dt_rel=2e-3))
