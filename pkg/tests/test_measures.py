import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from martingale_clt import measures as M


def test_moments_examples():
    mm = M.moments(M.two_point(1.0))
    assert mm.mean[0] == 0 and mm.cov[0, 0] == pytest.approx(1.0) and mm.radius == pytest.approx(1.0)
    mm = M.moments(M.point_mass([3.0, 4.0]))
    assert np.allclose(mm.mean, [3, 4]) and np.allclose(mm.cov, 0) and mm.radius == pytest.approx(5.0)
    mm = M.moments(M.DiscreteMeasure.from_atoms([0.0, 1.0], [0.75, 0.25]))
    assert mm.mean[0] == pytest.approx(0.25) and mm.cov[0, 0] == pytest.approx(3 / 16)


def test_construction_validation():
    with pytest.raises(ValueError):
        M.DiscreteMeasure.from_atoms([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        M.DiscreteMeasure.from_atoms([0.0, np.nan])
    with pytest.raises(ValueError):
        M.DiscreteMeasure.from_atoms([0.0, 1.0], [1.5, -0.5])


def test_duplicates_merged():
    m = M.DiscreteMeasure.from_atoms([1.0, 1.0, 2.0], [0.25, 0.25, 0.5])
    assert m.size == 2 and np.allclose(m.weights, [0.5, 0.5])


def test_lattice_examples():
    m = M.make_lattice_ball(1, 1.0, 1)
    assert np.allclose(np.sort(m.atoms[:, 0]), [-1, 0, 1]) and np.allclose(m.weights, 1 / 3)
    m = M.make_lattice_ball(2, 1.0, 1)
    assert m.size == 5 and np.allclose(m.weights, 0.2)
    m = M.make_lattice_ball(1, 2.0, 2)
    assert np.allclose(np.sort(m.atoms[:, 0]), [-4, -2, 0, 2, 4])
    assert M.moments(m).cov[0, 0] == pytest.approx(8.0)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 3), beta=st.floats(0.1, 5.0), r=st.integers(0, 3))
def test_lattice_mean_zero(d, beta, r):
    m = M.make_lattice_ball(d, beta, r)
    assert np.all(np.abs(M.moments(m).mean) <= 1e-12 * max(1.0, beta * r))


def test_isotropize_examples():
    m = M.isotropize(M.two_point(1.0))
    assert np.allclose(np.sort(m.atoms[:, 0]), [-1, 1], atol=1e-12)
    m = M.isotropize(M.DiscreteMeasure.from_atoms([0.0, 2.0]))
    assert np.allclose(np.sort(m.atoms[:, 0]), [-1, 1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 4))
def test_isotropize_property(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((3 * d + 5, d)) @ rng.standard_normal((d, d)) + rng.standard_normal(d)
    w = rng.random(len(X)) + 0.1
    m = M.DiscreteMeasure.from_atoms(X, w / w.sum())
    if np.linalg.eigvalsh(M.moments(m).cov)[0] < 1e-6:
        return
    mm = M.moments(M.isotropize(m))
    assert np.allclose(mm.mean, 0, atol=1e-8) and np.allclose(mm.cov, np.eye(d), atol=1e-8)


def test_sample_examples():
    rng = np.random.default_rng(0)
    assert np.all(M.sample(M.point_mass([1.0, 2.0]), rng, 7) == [1.0, 2.0])
    m = M.DiscreteMeasure.from_atoms([0.0, 1.0], [0.75, 0.25])
    f = M.sample(m, np.random.default_rng(5), 100_000)[:, 0].mean()
    assert 0.24 <= f <= 0.26
    a = M.sample(m, np.random.default_rng(9), 50)
    b = M.sample(m, np.random.default_rng(9), 50)
    assert np.array_equal(a, b)


def test_sample_frequencies_over_seeds():
    m = M.make_lattice_ball(1, 1.0, 2)
    k, ok = 10_000, 0
    for seed in range(100):
        x = M.sample(m, np.random.default_rng(seed), k)[:, 0]
        freq = np.array([(x == a).mean() for a in m.atoms[:, 0]])
        ok += np.all(np.abs(freq - m.weights) <= 4 * np.sqrt(m.weights * (1 - m.weights) / k))
    assert ok >= 99


def test_particle_cloud_examples():
    f = M.gauss(1.0)
    m = M.particle_cloud_product(f, 1, 100_000, np.random.default_rng(1))
    x = m.atoms[:, 0]
    assert abs(x.mean()) <= 3 * math.sqrt(1 / len(x))
    assert abs(x.var() - 1) <= 0.02
    g = M.gauss(1.0, half_width=0.5)
    m = M.particle_cloud_product(g, 2, 2000, np.random.default_rng(2))
    assert np.all(np.abs(m.atoms) <= 0.5)
    a = M.particle_cloud_product(f, 2, 100, np.random.default_rng(3), "stratified")
    b = M.particle_cloud_product(f, 2, 100, np.random.default_rng(3), "stratified")
    assert np.array_equal(a.atoms, b.atoms)


def test_density_moments():
    assert M.gauss(0.64).variance == pytest.approx(0.64, rel=1e-6)
    assert M.uniform().variance == pytest.approx(1.0, rel=1e-6)
    f = M.gauss_logcosh(2.0, 1.0)
    assert abs(f.mean) < 1e-10
    assert f.variance == pytest.approx(0.42523, rel=1e-4)
    assert f.moment(3) == pytest.approx(-0.05186, rel=1e-3)


def test_density_spec_and_json(tmp_path):
    assert M.density_from_spec("gauss(0.64)").variance == pytest.approx(0.64, rel=1e-6)
    with pytest.raises(ValueError):
        M.density_from_spec("cauchy")
    m = M.make_lattice_ball(2, 1.0, 1)
    p = tmp_path / "m.json"
    m.save(p)
    m2 = M.DiscreteMeasure.load(p)
    assert np.array_equal(m.atoms, m2.atoms) and np.array_equal(m.weights, m2.weights)
