import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given
from scipy.special import gamma

from fracnsfp.fene_model import SpringModel, build_quadrature
from fracnsfp.fractional_kernels import TimeGrid
from fracnsfp.langevin_mc import (
    LangevinParams,
    SubordinatorParams,
    advance_ensemble,
    block_rng,
    empirical_density,
    euler_maruyama_reference,
    inverse_subordinator_path,
    inverse_subordinator_paths,
    make_ensemble,
    sample_subordinator_increment,
    shear_velocity,
    thread_count,
    zero_velocity,
)

FENE = SpringModel("fene", 10.0)


def test_block_streams_are_reproducible_and_distinct():
    a = block_rng(5, 0).standard_normal(8)
    assert np.array_equal(a, block_rng(5, 0).standard_normal(8))
    assert not np.array_equal(a, block_rng(5, 1).standard_normal(8))
    assert not np.array_equal(a, block_rng(6, 0).standard_normal(8))


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("FRACNSFP_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("FRACNSFP_THREADS", "zero")
    assert thread_count() == 1


@pytest.mark.parametrize("alpha,tau0,d_tau", [(0.5, 1.0, 1.0), (0.7, 2.0, 0.3), (0.9, 0.5, 0.05)])
def test_subordinator_laplace_transform(alpha, tau0, d_tau):
    # oracle: E exp(-lam U) = exp(-d_tau tau0^(alpha-1) lam^alpha)
    p = SubordinatorParams(alpha, tau0)
    u = sample_subordinator_increment(p, d_tau, block_rng(2, 0), size=200_000)
    assert np.all(u > 0)
    for lam in (0.5, 1.0, 3.0):
        v = np.exp(-lam * u)
        se = v.std() / math.sqrt(len(v))
        assert abs(v.mean() - math.exp(-d_tau * tau0 ** (alpha - 1) * lam**alpha)) <= 4 * se


@given(st.floats(0.3, 0.95), st.floats(0.01, 2.0), st.floats(0.5, 5.0))
def test_subordinator_self_similarity(alpha, d_tau, c):
    # U(c d_tau) has the law of c^(1/alpha) U(d_tau); with one shared stream it is exact pathwise
    p = SubordinatorParams(alpha)
    a = sample_subordinator_increment(p, c * d_tau, block_rng(0, 0), size=16)
    b = sample_subordinator_increment(p, d_tau, block_rng(0, 0), size=16)
    np.testing.assert_allclose(a, c ** (1 / alpha) * b, rtol=1e-10)


def test_alpha_one_increment_is_deterministic():
    rng = block_rng(0, 0)
    assert sample_subordinator_increment(SubordinatorParams(1.0), 0.25, rng) == 0.25
    # the generator was not advanced
    assert rng.standard_normal() == block_rng(0, 0).standard_normal()
    with pytest.raises(ValueError):
        sample_subordinator_increment(SubordinatorParams(1.0), 0.0, rng)


def test_inverse_subordinator_alpha_one_is_identity():
    g = TimeGrid(0.1, 10)
    s = inverse_subordinator_path(SubordinatorParams(1.0), g, block_rng(0, 0), d_tau=0.03)
    np.testing.assert_allclose(s, g.times, atol=1e-12)


def test_inverse_subordinator_monotone_and_mean_scaling():
    # E S^t = t^alpha / (tau0^(alpha-1) Gamma(1 + alpha))
    a = 0.6
    g = TimeGrid(0.5, 8)
    s = inverse_subordinator_paths(SubordinatorParams(a), g, block_rng(1, 0), 4000, d_tau=0.01)
    assert np.all(np.diff(s, axis=1) >= 0)
    assert np.all(s[:, 0] == 0)
    mean = s[:, -1].mean()
    exact = g.t_final**a / gamma(1 + a)
    assert abs(mean - exact) <= 4 * s[:, -1].std() / math.sqrt(4000) + 0.01


def test_initial_fene_sample_matches_second_moment():
    params = LangevinParams(spring=FENE)
    ens = make_ensemble(50_000, params, SubordinatorParams(0.75), 3, 0.01)
    r2 = np.einsum("pi,pi->p", ens.q, ens.q)
    quad = build_quadrature(FENE, 2)
    exact = quad.integrate(np.einsum("pi,pi->p", quad.nodes, quad.nodes))
    assert abs(r2.mean() - exact) <= 4 * r2.std() / math.sqrt(len(r2))
    assert r2.max() < 10.0


def test_rejection_reweighting_produces_anisotropy():
    params = LangevinParams(spring=FENE)
    ens = make_ensemble(40_000, params, SubordinatorParams(0.75), 4, 0.01, lambda q: 1 + 0.1 * (q[:, 0] ** 2 - q[:, 1] ** 2), 2.0)
    d = ens.q[:, 0] ** 2 - ens.q[:, 1] ** 2
    assert d.mean() > 6 * d.std() / math.sqrt(len(d))
    with pytest.raises(ValueError):
        make_ensemble(10, params, SubordinatorParams(0.75), 4, 0.01, lambda q: np.ones(len(q)))


def test_fene_paths_stay_admissible_under_shear():
    params = LangevinParams(spring=SpringModel("fene", 3.0))
    ens = make_ensemble(3000, params, SubordinatorParams(0.8), 9, 0.02)
    ens = advance_ensemble(ens, shear_velocity(3.0), params, 1.0)
    assert np.all(np.einsum("pi,pi->p", ens.q, ens.q) < 3.0)
    assert np.all(ens.clock <= 1.0 + 1e-9)
    assert np.all(ens.clock + ens.next_increment > 1.0)


def test_alpha_one_matches_plain_euler_maruyama():
    params = LangevinParams(spring=FENE)
    ens = make_ensemble(5000, params, SubordinatorParams(1.0), 7, 0.01)
    ens = advance_ensemble(ens, shear_velocity(1.0), params, 0.5)
    x, q = euler_maruyama_reference(5000, params, 7, 0.01, 50, shear_velocity(1.0))
    assert np.array_equal(ens.x, x) and np.array_equal(ens.q, q)


@pytest.mark.parametrize("threads", [2, 3])
def test_thread_count_does_not_change_results(threads):
    params = LangevinParams(spring=FENE)
    sub = SubordinatorParams(0.7)
    runs = []
    for t in (1, threads):
        ens = make_ensemble(10_000, params, sub, 12, 0.01, block_size=1024)
        runs.append(advance_ensemble(ens, zero_velocity, params, 0.3, threads=t))
    assert np.array_equal(runs[0].q, runs[1].q)
    assert np.array_equal(runs[0].operational_time, runs[1].operational_time)


def test_free_diffusion_alpha_one_msd():
    # dq = sqrt(2 / (2 lambda)) dW per coordinate: E|q(t) - q(0)|^2 = d t / lambda
    params = LangevinParams(lambda_deb=1.0, spring=SpringModel("free"))
    ens = make_ensemble(20_000, params, SubordinatorParams(1.0), 1, 0.01)
    ens = advance_ensemble(ens, zero_velocity, params, 2.0)
    msd = np.sum((ens.q - ens.q0) ** 2, axis=1)
    assert abs(msd.mean() - 4.0) <= 4 * msd.std() / math.sqrt(len(msd))


def test_empirical_density_normalized():
    pts = block_rng(0, 0).uniform(-1, 1, (1000, 2))
    mass, edges = empirical_density(pts, bins=4, ranges=[(-1, 1), (-1, 1)])
    assert mass.sum() == pytest.approx(1.0)
    assert mass.shape == (4, 4) and len(edges) == 2
    with pytest.raises(ValueError):
        empirical_density(pts, bins=4, ranges=[(5, 6), (5, 6)])


def test_uniform_ensemble_gives_flat_histogram():
    n, bins = 100_000, 5
    pts = block_rng(4, 0).uniform(0, 1, (n, 2))
    mass, _ = empirical_density(pts, bins=bins, ranges=[(0, 1), (0, 1)])
    p = 1 / bins**2
    # multinomial standard deviation of each cell frequency
    assert np.abs(mass - p).max() <= 5 * math.sqrt(p * (1 - p) / n)
