import math

import numpy as np
import pytest

from martingale_clt import engine as E
from martingale_clt import entropy as H
from martingale_clt import measures as M


def test_fft_gaussian_is_zero():
    f = M.gauss(1.0)
    for n in (1, 4, 16):
        assert H.entropy_oracle_product_fft(f, n).value <= 1e-6
        assert H.entropy_oracle_product_fft(f, n, sigma_ref=1.0, d=3).value <= 1e-6


def test_fft_scaled_gaussian_closed_form():
    f = M.gauss(0.64)
    exact = H.gaussian_entropy_vs_standard(0.64 * np.eye(2))
    for n in (1, 8):
        assert H.entropy_oracle_product_fft(f, n, sigma_ref=1.0, d=2).value == pytest.approx(exact, abs=1e-6)


def test_fft_single_draw_matches_quadrature():
    for f in (M.gauss_logcosh(2.0, 0.0), M.gauss_logcosh(2.0, 1.0)):
        fft = H.entropy_oracle_product_fft(f, 1).value
        assert fft == pytest.approx(H.entropy_direct_quadrature(f), abs=1e-8)
    # the jump at the edge of a uniform law limits the grid; the reported
    # grid-doubling change brackets the error
    est = H.entropy_oracle_product_fft(M.uniform(), 1)
    assert abs(est.value - H.entropy_direct_quadrature(M.uniform())) <= 2 * est.ci


def test_fft_entropy_decreases_with_n():
    f = M.gauss_logcosh(2.0, 1.0)
    vals = [H.entropy_oracle_product_fft(f, n).value for n in (1, 2, 4, 8, 16)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_fft_aliasing_detected():
    # a narrow core plus far bumps: the sum has mass beyond fifteen standard deviations
    def pot(u):
        u = np.asarray(u, float)
        return -np.logaddexp(-0.5 * u * u, math.log(1e-4) - 0.5 * (np.abs(u) - 200) ** 2)

    f = M.Density1d(pot, -1e6, -210.0, 210.0)
    with pytest.raises(H.AliasingError):
        H.entropy_oracle_product_fft(f, 4)


def test_gaussian_entropy_examples():
    assert H.gaussian_entropy_vs_standard(np.eye(3)) == 0.0
    assert H.gaussian_entropy_vs_standard([[2.0]]) == pytest.approx(0.5 * (1 - math.log(2)))
    with pytest.raises(ValueError):
        H.gaussian_entropy_vs_standard(np.diag([1.0, 0.0]))


def test_strong_bound_examples():
    assert H.strong_logconcave_bound(1, 1.0, 0.0, 1) == pytest.approx(2.0)
    assert H.strong_logconcave_bound(2, 1.0, 0.5, 4) == pytest.approx(2 * 3 / 4)
    assert H.strong_logconcave_bound(1, 0.5, 0.0, 1) == pytest.approx(32.0)
    with pytest.raises(ValueError):
        H.strong_logconcave_bound(1, 0.0, 0.0, 1)


def _grid(times, var_g2, mean_g=1.0, d=1):
    L = len(times)
    I = np.broadcast_to(np.eye(d), (L, d, d)).copy()
    z = np.zeros((L, d, d))
    return E.MomentGrid(np.asarray(times, float), mean_g * I, mean_g**2 * I, mean_g**4 * I, z, z, z,
                        {}, {}, (1 - np.asarray(times))[:, None, None] * I, np.asarray(var_g2, float), 1000,
                        E.Policy(E.FOELLMER), np.arange(L))


def test_quant_bound_deterministic_gamma_is_zero():
    t = np.linspace(0, 0.99, 200)
    assert H.quant_entropy_bound_first(_grid(t, np.zeros(200)), n=3) == 0.0


def test_quant_bound_closed_form_and_scaling():
    # V = v, sigma = 1: integrand v / (1 - t), integral v log(1 / (1 - T))
    t = np.linspace(0, 0.9, 20001)
    v = 0.3
    mg = _grid(t, np.full(len(t), v))
    one = H.quant_entropy_bound_first(mg)
    assert one == pytest.approx(v * math.log(10), rel=1e-6)
    for n in (2, 7, 64):
        assert H.quant_entropy_bound_first(mg, n=n) == pytest.approx(one / n, rel=1e-12)


def test_quant_bound_rejects_vanishing_sigma():
    t = np.linspace(0, 0.5, 10)
    with pytest.raises(ValueError):
        H.quant_entropy_bound_first(_grid(t, np.ones(10), mean_g=0.0))


def test_variational_rejects_discrete_input():
    cfg = E.EngineConfig(seed=0)
    with pytest.raises(H.DiscreteInputError):
        H.estimate_entropy_variational(M.make_lattice_ball(1, 1.0, 1), cfg, 100)


def test_variational_scaled_gaussian():
    f = M.gauss(0.64)
    m = M.particle_cloud_product(f, 1, 2000, np.random.default_rng(0), "stratified")
    m = M.center(m)
    cfg = E.EngineConfig(seed=3, du=0.005)
    est = H.estimate_entropy_variational(m, cfg, 300, t_max=1 - 1e-3, acknowledge_particles=True)
    exact = H.gaussian_entropy_vs_standard([[0.64]])
    assert abs(est.value - exact) <= max(3 * est.ci, 0.1 * exact)
