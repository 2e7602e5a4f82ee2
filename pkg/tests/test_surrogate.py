import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from effpot.equilibrium import Histogram, fit_potential, histogram_density
from effpot.errors import ConfigurationError, ContractError, DegenerateDataError
from effpot.potentials import quadratic
from effpot.surrogate import (Distribution, EnsembleConfig, compare_reports, diagnose,
                              mean_trajectory, normalized_acf, run_ensemble, total_variation)

HARMONIC = quadratic(np.eye(1))


def point(x):
    return Distribution("point", loc=x)


def exact_harmonic_fit():
    edges = np.linspace(-4, 4, 201)
    counts = np.round(np.diff(norm.cdf(edges)) * 1e9).astype(np.int64)
    h = Histogram([edges], counts, counts / (counts.sum() * (edges[1] - edges[0])))
    return fit_potential(h, 1.0, basis_size=30)


def damped_oscillator_mean(t, q0, p0, gamma):
    # q'' + gamma q' + q = 0, underdamped
    w = math.sqrt(1 - gamma ** 2 / 4)
    a = q0
    b = (p0 + 0.5 * gamma * q0) / w
    return np.exp(-0.5 * gamma * t) * (a * np.cos(w * t) + b * np.sin(w * t))


def stationary_acf(t, gamma):
    w = math.sqrt(1 - gamma ** 2 / 4)
    return np.exp(-0.5 * gamma * t) * (np.cos(w * t) + gamma / (2 * w) * np.sin(w * t))


# ---------------------------------------------------------------- config


def test_times_include_origin():
    cfg = EnsembleConfig(3, 1.0, 0.01, store_dt=0.1)
    assert cfg.n_steps == 100 and cfg.stride == 10
    np.testing.assert_allclose(cfg.times, np.arange(11) * 0.1)


@pytest.mark.parametrize("kw", [
    {"n_traj": 0}, {"horizon": -1.0}, {"step": 0.3}, {"store_dt": 0.015},
    {"noise_step": 0.003}, {"seed": -1},
])
def test_config_validation(kw):
    base = dict(n_traj=2, horizon=1.0, step=0.01)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        EnsembleConfig(**base)


def test_distribution_sampling(rng):
    u = Distribution("uniform", low=-0.5, high=0.5, shift=0.38)
    x = np.array([u.sample(rng, 1)[0] for _ in range(2000)])
    assert x.min() >= -0.12 and x.max() <= 0.88
    assert Distribution.from_dict(u.to_dict()) == u
    with pytest.raises(ConfigurationError):
        Distribution("cauchy")


# ---------------------------------------------------------------- ensembles


def test_hamiltonian_ellipse():
    cfg = EnsembleConfig(1, 50.0, 0.01, point(-2.0), point(0.0))
    ens = run_ensemble(HARMONIC, "hamiltonian", cfg)
    h = 0.5 * ens.qs[0, :, 0] ** 2 + 0.5 * ens.ps[0, :, 0] ** 2
    assert np.abs(h - 2.0).max() <= 1e-3


def test_langevin_without_friction_equals_hamiltonian():
    cfg = EnsembleConfig(1, 5.0, 0.01, Distribution("normal", -2, 1), Distribution("normal", 0, 1),
                         seed=9)
    a = run_ensemble(HARMONIC, "langevin", cfg, friction=0.0)
    b = run_ensemble(HARMONIC, "hamiltonian", cfg)
    np.testing.assert_array_equal(a.qs, b.qs)
    np.testing.assert_array_equal(a.ps, b.ps)


def test_mean_path_follows_damped_oscillator():
    gamma = 1.0
    cfg = EnsembleConfig(4000, 50.0, 0.01, Distribution("normal", -2, 1),
                         Distribution("normal", 0, 1), seed=3, store_dt=0.5)
    ens = run_ensemble(HARMONIC, "langevin", cfg, friction=gamma)
    mp = mean_trajectory(ens)[:, 0]
    expect = damped_oscillator_mean(ens.t, -2.0, 0.0, gamma)
    assert np.abs(mp - expect).max() < 5 * math.sqrt(1.0 / 4000) * 1.5
    assert abs(mp[-1]) < 0.1


def test_seed_determinism_across_jobs():
    cfg = EnsembleConfig(12, 2.0, 0.01, seed=21, store_dt=0.1, noise_step=0.005)
    a = run_ensemble(HARMONIC, "langevin", cfg, friction=0.5, jobs=1)
    b = run_ensemble(HARMONIC, "langevin", cfg, friction=0.5, jobs=3)
    np.testing.assert_array_equal(a.qs, b.qs)
    np.testing.assert_array_equal(a.ps, b.ps)


def test_common_noise_couples_step_sizes():
    # a fine and a coarse run share initial states and the Brownian path
    kw = dict(seed=5, store_dt=0.1, noise_step=0.001)
    fine = run_ensemble(HARMONIC, "langevin", EnsembleConfig(50, 5.0, 0.001, **kw), friction=0.5)
    coarse = run_ensemble(HARMONIC, "langevin", EnsembleConfig(50, 5.0, 0.01, **kw), friction=0.5)
    np.testing.assert_array_equal(fine.qs[:, 0], coarse.qs[:, 0])
    diff = np.abs(fine.qs - coarse.qs).max()
    indep = run_ensemble(HARMONIC, "langevin", EnsembleConfig(50, 5.0, 0.01, seed=6,
                                                              store_dt=0.1, noise_step=0.001),
                         friction=0.5)
    assert diff < 0.2 * np.abs(fine.qs - indep.qs).max()


def test_fitted_surrogate_equilibrium():
    fit = exact_harmonic_fit()
    cfg = EnsembleConfig(500, 50.0, 0.05, seed=4, store_dt=0.5)
    ens = run_ensemble(fit, "langevin", cfg, friction=1.0, beta=1.0)
    late = ens.qs[:, ens.t >= 25.0].ravel()
    edges = np.linspace(-4, 4, 41)
    counts, _ = np.histogram(late, edges)
    emp = counts / counts.sum()
    ref = np.diff(norm.cdf(edges))
    ref /= ref.sum()
    assert 0.5 * np.abs(emp - ref).sum() <= 0.05


def test_domain_exit_flags_trajectories():
    fit = exact_harmonic_fit()
    cfg = EnsembleConfig(20, 1.0, 0.01, Distribution("normal", 0, 1), point(0.0), seed=1)
    cfg_far = EnsembleConfig(20, 1.0, 0.01, point(12.0), point(0.0), seed=1)
    assert run_ensemble(fit, "hamiltonian", cfg).n_excluded == 0
    far = run_ensemble(fit, "hamiltonian", cfg_far)
    assert far.n_excluded == 20 and far.kept().shape[0] == 0
    with pytest.raises(DegenerateDataError):
        diagnose(far)


# ---------------------------------------------------------------- diagnostics


def test_mean_of_constants():
    x = np.array([np.ones(10), 3 * np.ones(10)])
    np.testing.assert_array_equal(mean_trajectory(x)[:, 0], 2.0)


def test_mean_of_copies(rng):
    t = rng.standard_normal(25)
    np.testing.assert_array_equal(mean_trajectory([t] * 7)[:, 0], t)


def test_mean_ragged():
    with pytest.raises(ContractError):
        mean_trajectory([np.ones(3), np.ones(4)])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 32 - 1))
def test_mean_linearity(m1, m2, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m1, 15, 2))
    b = rng.standard_normal((m2, 15, 2))
    both = mean_trajectory(np.concatenate([a, b]))
    weighted = (m1 * mean_trajectory(a) + m2 * mean_trajectory(b)) / (m1 + m2)
    np.testing.assert_allclose(both, weighted, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(5, 40), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_acf_lag_zero_is_one(m, n, d, seed):
    x = np.random.default_rng(seed).standard_normal((m, n, d))
    acf = normalized_acf(x, n - 1)
    assert np.all(acf[0] == 1.0)


def test_acf_white_noise(rng):
    m, n = 200, 500
    acf = normalized_acf(rng.standard_normal((m, n)), 20)
    assert np.abs(acf[1:]).max() < 3 / math.sqrt(n * m) * 1.5


def test_acf_zero_covariance():
    with pytest.raises(DegenerateDataError):
        normalized_acf(np.ones((3, 10)), 2)


def test_acf_bad_lag(rng):
    with pytest.raises(ContractError):
        normalized_acf(rng.standard_normal((3, 10)), 10)


def test_acf_matches_stationary_langevin():
    gamma = 0.5
    cfg = EnsembleConfig(500, 60.0, 0.01, Distribution("normal", 0, 1),
                         Distribution("normal", 0, 1), seed=8, store_dt=0.1)
    ens = run_ensemble(HARMONIC, "langevin", cfg, friction=gamma)
    acf = normalized_acf(ens, 100)[:, 0]
    lags = np.arange(101) * 0.1
    assert np.abs(acf - stationary_acf(lags, gamma)).max() < 0.05


def test_diagnose_fields():
    cfg = EnsembleConfig(30, 10.0, 0.05, seed=2, store_dt=0.1)
    ens = run_ensemble(HARMONIC, "langevin", cfg, friction=1.0)
    rep = diagnose(ens, bins=20)
    assert rep.mean_path.shape == (101, 1)
    assert rep.acf.shape == (51, 1) and rep.acf[0, 0] == 1.0
    assert rep.equilibrium_hist.total == 30 * 51
    assert rep.phase_portrait is None
    ham = diagnose(run_ensemble(HARMONIC, "hamiltonian", EnsembleConfig(2, 10.0, 0.05)), bins=20)
    assert ham.phase_portrait.shape == (201, 2)
    assert set(rep.to_dict()) >= {"mean_path", "acf", "equilibrium"}


def test_compare_identical():
    cfg = EnsembleConfig(30, 10.0, 0.05, seed=2, store_dt=0.1)
    rep = diagnose(run_ensemble(HARMONIC, "langevin", cfg, friction=1.0), bins=20)
    out = compare_reports(rep, rep)
    for key in ("mean_path_linf", "mean_path_l2", "acf_linf", "acf_l2", "equilibrium_tv"):
        assert out[key] == 0.0
    assert out["warnings"] == []


def test_compare_resamples_grids():
    cfg_a = EnsembleConfig(30, 10.0, 0.05, seed=2, store_dt=0.1)
    cfg_b = EnsembleConfig(30, 10.0, 0.05, seed=2, store_dt=0.05)
    a = diagnose(run_ensemble(HARMONIC, "langevin", cfg_a, friction=1.0), bins=20)
    b = diagnose(run_ensemble(HARMONIC, "langevin", cfg_b, friction=1.0), bins=20)
    out = compare_reports(a, b)
    assert out["mean_path_linf"] < 1e-12


def test_compare_disjoint_support():
    a = diagnose(run_ensemble(HARMONIC, "hamiltonian",
                              EnsembleConfig(3, 1.0, 0.01, point(-3.0), point(0.0))), bins=10)
    b = diagnose(run_ensemble(quadratic(np.eye(1), center=[20.0]), "hamiltonian",
                              EnsembleConfig(3, 1.0, 0.01, point(21.0), point(0.0))), bins=10)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        out = compare_reports(a, b)
    assert out["equilibrium_tv"] == 1.0
    assert out["warnings"]


def test_total_variation_merges_binnings(rng):
    # uniform data: spreading mass evenly inside coarse bins is exact
    x = rng.uniform(-4, 4, 100000)
    a = histogram_density(x, bins=40, range=[(-4, 4)])
    b = histogram_density(x, bins=80, range=[(-4, 4)])
    assert total_variation(a, b) < 0.01
    assert total_variation(a, a) == 0.0
