import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from effpot.equilibrium import (FittedPotential, Histogram, aligned_error, beta_in_range,
                                estimate_beta, fit_potential, histogram_density,
                                kl_to_reference, learn_potential, normality_test, scale_scan,
                                well_sampled)
from effpot.errors import (DegenerateDataError, IllPosedFitError, InsufficientDataError)
from effpot.integrators import SampleSet, SimConfig, State, simulate_damped
from effpot.potentials import BuiltinSpec, make_builtin, multisine, quadratic

HARMONIC = quadratic(np.eye(1))
DOUBLEWELL = multisine("doublewell")


def gibbs_samples(potential, beta, n, rng, lo=-4.0, hi=4.0):
    """Inverse-CDF sampler on a fine grid: the independent Gibbs oracle."""
    x = np.linspace(lo, hi, 200001)
    w = np.exp(-beta * potential.values(x[:, None]))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    return np.interp(rng.random(n), cdf, x)


# ---------------------------------------------------------------- normality


def test_normal_draws_pass_most_seeds():
    passed = sum(normality_test(np.random.default_rng(s).standard_normal(100000)).passed
                 for s in range(40))
    assert passed >= 0.95 * 40 - 2  # binomial slack around the nominal 99%


def test_uniform_draws_fail(rng):
    assert not normality_test(rng.uniform(-1, 1, 100000)).passed


def test_too_few_samples(rng):
    with pytest.raises(InsufficientDataError):
        normality_test(rng.standard_normal(999))


def test_constant_momenta_fail():
    rep = normality_test(np.ones(5000))
    assert not rep.passed and rep.per_dim_p[0] == 0.0


def test_report_contents(rng):
    p = rng.standard_normal((20000, 2))
    rep = normality_test(p, max_points=5000)
    assert rep.n_points == 5000 and rep.stride == 4
    assert np.all((rep.per_dim_p >= 0) & (rep.per_dim_p <= 1))
    assert rep.cross_corr_max < 0.1
    assert rep.to_dict()["verdict"] in ("pass", "fail")


def test_correlated_gaussian_momenta_pass(rng):
    p = rng.multivariate_normal([0, 0], [[1, 0.9], [0.9, 1]], 20000)
    rep = normality_test(p)
    assert rep.passed and rep.cross_corr_max > 0.8


def test_quad3scale_gate_separates_scales():
    v = make_builtin(BuiltinSpec.default("quad3scale"))
    coarse = simulate_damped(v, SimConfig(delta=0.5, friction=0.1, n_steps=2_000_000),
                             State([-2.0], [0.0]))
    fine = simulate_damped(v, SimConfig(delta=0.002, friction=0.1, n_steps=1_000_000),
                           State([-2.0], [0.0]))
    assert normality_test(coarse).passed
    assert not normality_test(fine).passed


# ---------------------------------------------------------------- temperature


def test_beta_standard_normal(rng):
    assert estimate_beta(rng.standard_normal(200000)) == pytest.approx(1.0, abs=0.02)


def test_beta_variance_four(rng):
    assert estimate_beta(2 * rng.standard_normal(200000)) == pytest.approx(0.25, abs=0.01)


def test_beta_multidimensional_is_one(rng):
    assert estimate_beta(3 * rng.standard_normal((1000, 2))) == 1.0


def test_beta_zero_variance():
    with pytest.raises(DegenerateDataError):
        estimate_beta(np.zeros(100))


def test_beta_range():
    assert beta_in_range(0.5) and not beta_in_range(0.1) and not beta_in_range(1.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2 ** 32 - 1))
def test_beta_scaling_law(c, seed):
    p = np.random.default_rng(seed).standard_normal(500)
    assert estimate_beta(c * p) == pytest.approx(estimate_beta(p) / c ** 2, rel=1e-9)


# ---------------------------------------------------------------- histogram


def test_two_bin_split():
    h = histogram_density(np.array([0.1, 0.1, 0.9, 0.9]), bins=2, range=[(0.0, 1.0)])
    np.testing.assert_allclose(h.density, [1.0, 1.0])
    np.testing.assert_array_equal(h.counts, [2, 2])


def test_padding_and_counts(rng):
    x = rng.standard_normal(1000)
    h = histogram_density(x, bins=50)
    span = x.max() - x.min()
    assert h.edges[0][0] == pytest.approx(x.min() - 0.01 * span)
    assert h.edges[0][-1] == pytest.approx(x.max() + 0.01 * span)
    assert h.total == 1000


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(10, 40), st.integers(0, 2 ** 32 - 1))
def test_histogram_normalized(d, bins, seed):
    x = np.random.default_rng(seed).standard_normal((500, d))
    h = histogram_density(x, bins=bins)
    assert float(h.density.sum() * h.bin_volume) == pytest.approx(1.0, abs=1e-12)
    assert h.total == 500


def test_collapsed_samples_get_finite_bins():
    h = histogram_density(np.full(100, 3.0), bins=10)
    assert np.all(np.diff(h.edges[0]) > 0)
    assert np.isfinite(h.density).all()


def test_histogram_kl_to_gibbs(rng):
    h = histogram_density(rng.standard_normal(1_000_000), bins=200)
    assert kl_to_reference(h, norm.cdf) < 1e-3


def test_empty_bins_excluded_from_regression(rng):
    x = np.concatenate([rng.uniform(-2, -1, 50000), rng.uniform(1, 2, 50000)])
    h = histogram_density(x, bins=200)
    assert np.any(h.counts == 0)
    assert np.all(h.density[h.counts == 0] == 0)
    with pytest.raises(IllPosedFitError, match="no usable bins"):
        fit_potential(h, 1.0, basis_size=30)


# ---------------------------------------------------------------- fitting


def test_fit_harmonic_from_gibbs(rng):
    q = gibbs_samples(HARMONIC, 1.0, 1_000_000, rng)
    h = histogram_density(q, bins=200)
    fit = fit_potential(h, 1.0, basis_size=20)
    grid = np.linspace(-2, 2, 401)
    assert aligned_error(fit, HARMONIC, grid) <= 0.05


def test_fit_residual_small_on_exact_density():
    # noise-free histogram: counts proportional to the Gibbs mass
    edges = np.linspace(-3, 3, 201)
    mass = np.diff(norm.cdf(edges))
    counts = np.round(mass * 1e9).astype(np.int64)
    h = Histogram([edges], counts, counts / (counts.sum() * (edges[1] - edges[0])))
    fit = fit_potential(h, 1.0, basis_size=20)
    assert fit.residual_rms < 0.02
    assert aligned_error(fit, HARMONIC, np.linspace(-2, 2, 401)) < 0.01


def test_fit_uniform_density_is_flat():
    edges = np.linspace(0, 1, 101)
    counts = np.full(100, 1000, dtype=np.int64)
    h = Histogram([edges], counts, np.ones(100))
    fit = fit_potential(h, 1.0, basis_size=10)
    np.testing.assert_allclose(fit.values(np.linspace(0.01, 0.99, 50)[:, None]), 0.0, atol=1e-10)


@pytest.mark.parametrize("potential, beta", [(HARMONIC, 1.0), (DOUBLEWELL, 1.0), (DOUBLEWELL, 3.0)])
def test_full_loop_recovers_potential(potential, beta, rng):
    q = gibbs_samples(potential, beta, 1_000_000, rng)
    h = histogram_density(q, bins=200)
    fit = fit_potential(h, beta, basis_size=30)
    assert aligned_error(fit, potential, well_sampled(h, 1e-3)) <= 0.1


def test_fit_gauge_invariance(rng):
    h = histogram_density(rng.standard_normal(200000), bins=100)
    a = fit_potential(h, 1.0, basis_size=15)
    b = fit_potential(h.scaled(37.5), 1.0, basis_size=15)
    x = np.linspace(-3, 3, 101)[:, None]
    np.testing.assert_allclose(a.values(x), b.values(x), atol=1e-10)


def test_fit_minimum_is_zero(rng):
    h = histogram_density(rng.standard_normal(200000), bins=100)
    fit = fit_potential(h, 1.0, basis_size=15)
    lo, hi = fit.domain[0]
    v = fit.values(np.linspace(lo, hi, 5001)[:, None])
    assert v.min() == pytest.approx(0.0, abs=1e-6)
    assert v.min() >= -1e-12


def test_fit_gradient_matches_values(rng):
    from effpot.potentials import gradient_check
    h = histogram_density(rng.standard_normal(200000), bins=100)
    fit = fit_potential(h, 1.0, basis_size=15)
    assert gradient_check(fit, np.linspace(-2.5, 2.5, 40)).max_rel_error < 1e-5


def test_fit_extrapolates_confining(rng):
    h = histogram_density(rng.standard_normal(100000), bins=100)
    fit = fit_potential(h, 1.0, basis_size=15)
    lo, hi = fit.domain[0]
    assert fit.value([hi + 5]) > fit.value([hi + 1]) > 0
    assert fit.value([lo - 5]) > fit.value([lo - 1]) > 0
    assert not fit.in_domain([[hi + 1]])[0] and fit.in_domain([[0.0]])[0]


def test_fit_serialization_round_trip(rng):
    h = histogram_density(rng.standard_normal(100000), bins=100)
    fit = fit_potential(h, 0.8, basis_size=15)
    back = FittedPotential.from_dict(fit.to_dict())
    x = np.linspace(-6, 6, 77)[:, None]
    np.testing.assert_array_equal(back.values(x), fit.values(x))
    assert back.beta_hat == 0.8


def test_fit_too_few_bins(rng):
    h = histogram_density(rng.standard_normal(1000), bins=20)
    with pytest.raises(IllPosedFitError):
        fit_potential(h, 1.0, basis_size=30)


def test_fit_2d_gaussian(rng):
    hmat = np.array([[2.0, 0.5], [0.5, 1.0]])
    q = rng.multivariate_normal([0.5, -0.5], np.linalg.inv(hmat), 2_000_000)
    h = histogram_density(q, bins=60)
    fit = fit_potential(h, 1.0)
    ref = quadratic(hmat, center=[0.5, -0.5])
    assert aligned_error(fit, ref, well_sampled(h, 1e-2)) < 0.25
    mins = fit.local_minima()
    assert np.linalg.norm(mins[0] - [0.5, -0.5]) < 0.1
    back = FittedPotential.from_dict(fit.to_dict())
    pts = rng.uniform(-2, 2, (50, 2))
    np.testing.assert_array_equal(back.values(pts), fit.values(pts))


def test_fit_2d_gauge_invariance(rng):
    q = rng.standard_normal((200000, 2))
    h = histogram_density(q, bins=30)
    a = fit_potential(h, 1.0)
    b = fit_potential(h.scaled(0.01), 1.0)
    pts = rng.uniform(-2, 2, (50, 2))
    np.testing.assert_allclose(a.values(pts), b.values(pts), atol=1e-10)


def test_local_minima_doublewell(rng):
    q = gibbs_samples(DOUBLEWELL, 3.0, 1_000_000, rng)
    fit = fit_potential(histogram_density(q, bins=200), 3.0)
    mins = fit.local_minima()
    assert len(mins) == 2
    np.testing.assert_allclose(np.sort(mins[:, 0]), [-1, 1], atol=0.05)


def test_aligned_error_ignores_constants():
    assert aligned_error(multisine("quadratic", center=0.0), quadratic(np.eye(1)),
                         np.linspace(-2, 2, 11)) == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------- pipelines


def test_learn_potential_gate_blocks_fit():
    v = make_builtin(BuiltinSpec.default("quad3scale"))
    res = learn_potential(v, SimConfig(delta=0.002, friction=0.1, n_steps=1_000_000),
                          State([-2.0], [0.0]))
    assert res.fit is None and not res.normality.passed
    assert any("normality" in w for w in res.warnings)


def test_learn_potential_quad3scale_short():
    v = make_builtin(BuiltinSpec.default("quad3scale"))
    res = learn_potential(v, SimConfig(delta=0.5, friction=0.1, n_steps=5_000_000, subsample=5),
                          State([-2.0], [0.0]), bins=100, basis_size=15)
    assert res.normality.passed and res.fit is not None
    assert beta_in_range(res.beta_hat)
    assert aligned_error(res.fit, HARMONIC, np.linspace(-2, 2, 201)) < 0.25


def test_scale_scan_single_entry():
    v = make_builtin(BuiltinSpec.default("quad3scale"))
    cfg = SimConfig(delta=0.5, friction=0.1, n_steps=2_000_000, subsample=5)
    out = scale_scan(v, [0.5], cfg, State([-2.0], [0.0]), bins=100, basis_size=15)
    assert len(out) == 1 and out[0].ok
    assert out[0].to_dict()["status"] == "fit"


def test_scale_scan_records_divergence():
    v = make_builtin(BuiltinSpec.default("quad3scale"))
    cfg = SimConfig(delta=0.5, friction=0.1, n_steps=1_000_000, subsample=5)
    out = scale_scan(v, [2.5, 0.5], cfg, State([-2.0], [0.0]), bins=100, basis_size=15)
    assert not out[0].ok and "Divergence" in out[0].error
    assert out[1].ok


@pytest.mark.parametrize("deltas", [[0.1, 0.5], [0.5, 0.5], [0.5, -0.1], []])
def test_scale_scan_validates(deltas):
    from effpot.errors import ConfigurationError
    with pytest.raises(ConfigurationError):
        scale_scan(HARMONIC, deltas, SimConfig(delta=0.5, n_steps=10), State([0.0], [1.0]))
