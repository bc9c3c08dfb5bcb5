import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coxrs.cox import (
    CoxFitError,
    NumericalError,
    breslow,
    fit_cox,
    nelson_aalen,
    overfit_markers,
    partial_log_likelihood,
    plik_gradient_hessian,
)
from coxrs.rs_quadrature import discretize, solve_rs_quadrature
from coxrs.survival import CensoringSpec, HazardSpec, SurvivalDataset, generate_dataset

LL = HazardSpec.log_logistic()
UNIF4 = CensoringSpec.uniform(4.0)


def naive_plik(beta, times, events, Z):
    """Double loop over subjects, straight from the definition."""
    n = len(times)
    total = 0.0
    for i in range(n):
        if not events[i]:
            continue
        s = sum(math.exp(float(Z[j] @ beta)) for j in range(n) if times[j] >= times[i])
        total += float(Z[i] @ beta) - math.log(s / n)
    return total


def small_data(rng, n=12, p=3, ties=False):
    t = rng.exponential(size=n) + 0.01
    if ties:
        t = np.round(t, 1) + 0.1
    d = rng.integers(0, 2, size=n)
    d[0] = 1
    return SurvivalDataset(t, d, rng.standard_normal((n, p)))


# --- partial likelihood ------------------------------------------------------------

def test_single_subject_likelihood_is_zero():
    data = SurvivalDataset([1.3], [1], [[0.7, -2.0]])
    for b in ([0.0, 0.0], [3.0, -1.0], [-10.0, 5.0]):
        assert partial_log_likelihood(b, data) == pytest.approx(0.0, abs=1e-12)


def test_zero_beta_reduces_to_risk_set_counts(rng):
    data = small_data(rng, n=15)
    R = np.array([(data.times >= ti).sum() for ti in data.times])
    expected = -np.sum(data.events * np.log(R / data.n))
    assert partial_log_likelihood(np.zeros(3), data) == pytest.approx(expected, rel=1e-13)


def test_three_subjects_match_double_loop():
    data = SurvivalDataset([2.0, 1.0, 3.0], [1, 1, 0], [[0.5, -1.0], [1.5, 0.2], [-0.3, 0.4]])
    beta = np.array([0.8, -0.6])
    expected = naive_plik(beta, data.times, data.events, data.covariates)
    assert partial_log_likelihood(beta, data) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("ties", [False, True])
def test_random_instances_match_double_loop(rng, ties):
    for _ in range(5):
        data = small_data(rng, ties=ties)
        beta = rng.normal(size=3)
        expected = naive_plik(beta, data.times, data.events, data.covariates)
        assert partial_log_likelihood(beta, data) == pytest.approx(expected, rel=1e-12)


def test_likelihood_stable_for_large_predictors(rng):
    data = small_data(rng)
    val = partial_log_likelihood(np.array([400.0, -300.0, 200.0]), data)
    assert np.isfinite(val)


def test_nonfinite_beta_rejected(rng):
    data = small_data(rng)
    with pytest.raises(NumericalError):
        partial_log_likelihood([np.nan, 0, 0], data)
    with pytest.raises(ValueError):
        partial_log_likelihood([0.0, 0.0], data)


# --- derivatives ---------------------------------------------------------------------

def test_identical_covariates_give_zero_gradient():
    data = SurvivalDataset([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 1], np.tile([[0.3, -1.2]], (4, 1)))
    for b in ([0.0, 0.0], [2.0, 1.0]):
        g, _ = plik_gradient_hessian(b, data)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


@pytest.mark.parametrize("ties", [False, True])
def test_gradient_and_hessian_match_finite_differences(rng, ties):
    data = small_data(rng, n=20, p=4, ties=ties)
    beta = 0.5 * rng.normal(size=4)
    g, H = plik_gradient_hessian(beta, data)
    h = 1e-5
    eye = np.eye(4)
    g_fd = np.array([(partial_log_likelihood(beta + h * e, data)
                      - partial_log_likelihood(beta - h * e, data)) / (2 * h) for e in eye])
    np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-8)
    H_fd = np.array([(plik_gradient_hessian(beta + h * e, data)[0]
                      - plik_gradient_hessian(beta - h * e, data)[0]) / (2 * h) for e in eye])
    np.testing.assert_allclose(H, H_fd, rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(H, H.T)
    assert np.max(np.linalg.eigvalsh(H)) <= 1e-12


@given(st.integers(0, 10_000))
def test_likelihood_concave_along_segments(seed):
    rng = np.random.default_rng(seed)
    data = small_data(rng, n=10, p=2)
    b0, b1 = rng.normal(size=2), rng.normal(size=2)
    d = b1 - b0
    for s in np.linspace(0.05, 0.95, 10):
        _, H = plik_gradient_hessian(b0 + s * d, data)
        assert d @ H @ d <= 1e-10
    vals = [partial_log_likelihood(b0 + s * d, data) for s in np.linspace(0, 1, 11)]
    assert np.all(np.diff(vals, 2) <= 1e-10)


# --- fitting ----------------------------------------------------------------------------

def test_fit_converges_to_stationary_point(rng):
    data = generate_dataset(300, 5, 1.0, LL, UNIF4, rng)
    fit = fit_cox(data)
    assert fit.converged and not fit.separation_detected
    g, _ = plik_gradient_hessian(fit.beta_hat, data)
    assert np.max(np.abs(g)) <= 1e-8
    assert fit.final_gradient_norm <= 1e-8
    assert fit.log_likelihood == pytest.approx(partial_log_likelihood(fit.beta_hat, data))
    # the trace records a non-decreasing likelihood
    ll = [row[1] for row in fit.trace]
    assert np.all(np.diff(ll) >= -1e-10)


def test_classical_regime_matches_asymptotic_standard_error():
    rng = np.random.default_rng(7)
    data = generate_dataset(10_000, 100, 1.0, LL, UNIF4, rng)
    fit = fit_cox(data)
    assert fit.converged
    _, H = plik_gradient_hessian(fit.beta_hat, data)
    se = np.sqrt(np.diag(np.linalg.inv(-H)))
    assert abs(fit.beta_hat[0] - 1.0) <= 1.96 * se[0]
    # the zero components scatter like the classical standard error as well
    z = fit.beta_hat[1:] / se[1:]
    assert 0.8 < np.std(z) < 1.2


def test_monotone_likelihood_flags_separation():
    # covariate rank order equals event-time order: larger z fails earlier
    n = 8
    t = np.arange(1.0, n + 1)
    z = -t[:, None]
    fit = fit_cox(SurvivalDataset(t, np.ones(n, int), z))
    assert fit.separation_detected
    assert not fit.converged
    # the oracle: the likelihood keeps rising along the ray
    vals = [partial_log_likelihood([b], SurvivalDataset(t, np.ones(n, int), z))
            for b in (1, 3, 6)]
    # with the 1/n normalisation the supremum is n log n, approached only as b -> inf
    assert vals[0] < vals[1] < vals[2] < n * math.log(n)


def test_constant_covariate_is_non_identifiable():
    data = SurvivalDataset([1.0, 2.0, 3.0], [1, 1, 0], [[1.0, 0.2], [1.0, -0.3], [1.0, 0.9]])
    with pytest.raises(CoxFitError, match="constant"):
        fit_cox(data)


def test_no_events_is_an_error():
    data = SurvivalDataset([1.0, 2.0], [0, 0], [[0.1], [0.2]])
    with pytest.raises(CoxFitError):
        fit_cox(data)


def test_time_rescaling_leaves_fit_unchanged(rng):
    data = generate_dataset(200, 4, 1.0, LL, UNIF4, rng)
    scaled = SurvivalDataset(data.times * 3.7, data.events, data.covariates)
    f1, f2 = fit_cox(data), fit_cox(scaled)
    np.testing.assert_allclose(f1.beta_hat, f2.beta_hat, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f1.breslow.increments, f2.breslow.increments, rtol=1e-10)
    np.testing.assert_allclose(f2.breslow.jump_times, 3.7 * f1.breslow.jump_times, rtol=1e-14)


# --- Breslow -------------------------------------------------------------------------------

def test_breslow_two_events_by_hand():
    data = SurvivalDataset([1.0, 2.0], [1, 1], [[0.3], [-0.4]])
    L = breslow(data, [0.0])
    assert L(1.5) == pytest.approx(0.5)
    assert L(2.5) == pytest.approx(1.5)
    assert L(0.5) == 0.0


def test_breslow_ignores_early_censored_subject():
    base = SurvivalDataset([1.0, 2.0], [1, 1], [[0.3], [-0.4]])
    more = SurvivalDataset([1.0, 2.0, 0.5], [1, 1, 0], [[0.3], [-0.4], [2.0]])
    for b in ([0.0], [0.7]):
        L1, L2 = breslow(base, b), breslow(more, b)
        np.testing.assert_array_equal(L1.jump_times, L2.jump_times)
        np.testing.assert_allclose(L1.cumulative_values, L2.cumulative_values, rtol=1e-15)


def test_breslow_at_zero_is_nelson_aalen(rng):
    data = small_data(rng, n=30, ties=True)
    L = breslow(data, np.zeros(3))
    na = nelson_aalen(data.times, data.events)
    np.testing.assert_array_equal(L.jump_times, na.jump_times)
    np.testing.assert_allclose(L.cumulative_values, na.cumulative_values, rtol=1e-14)
    # jumps 1/R_i at each uncensored time
    ev_t = np.unique(data.times[data.events == 1])
    jumps = [(data.events[data.times == s]).sum() / (data.times >= s).sum() for s in ev_t]
    np.testing.assert_allclose(na.increments, jumps, rtol=1e-14)


def test_breslow_calibration_identity(rng):
    data = generate_dataset(250, 10, 1.0, LL, UNIF4, rng)
    fit = fit_cox(data)
    L = fit.breslow
    e = np.exp(data.covariates @ fit.beta_hat)
    total = 0.0
    for s, dj in zip(L.jump_times, L.increments):
        total += dj * e[data.times >= s].sum()
    assert total == pytest.approx(data.events.sum(), rel=1e-12)
    assert np.all(L.increments > 0)
    assert set(L.jump_times) <= set(data.times[data.events == 1])


# --- markers ----------------------------------------------------------------------------------

def test_markers_definitions():
    b0 = np.array([1.0, 0.0, 0.0])
    mk = overfit_markers(b0, b0)
    assert (mk.kappa_hat, mk.v_hat) == (1.0, 0.0)
    mk = overfit_markers(2 * b0, b0)
    assert (mk.kappa_hat, mk.v_hat) == (2.0, 0.0)
    mk = overfit_markers(np.array([0.0, 3.0, 4.0]), b0)
    assert mk.kappa_hat == 0.0 and mk.v_hat == pytest.approx(5.0)
    assert math.isnan(mk.second_moment)


def test_markers_with_covariance_and_second_moment(rng):
    M = rng.normal(size=(4, 4))
    A = M @ M.T + np.eye(4)
    b0, bh = rng.normal(size=4), rng.normal(size=4)
    Z = rng.normal(size=(50, 4))
    mk = overfit_markers(bh, b0, A=A, covariates=Z)
    assert mk.kappa_hat == pytest.approx(b0 @ A @ bh / (b0 @ A @ b0))
    assert mk.v_hat ** 2 == pytest.approx(bh @ A @ bh - mk.kappa_hat ** 2 * (b0 @ A @ b0))
    assert mk.second_moment == pytest.approx(np.mean((Z @ bh) ** 2))


def test_markers_zero_signal_error():
    with pytest.raises(ValueError, match="kappa"):
        overfit_markers([1.0, 2.0], [0.0, 0.0])


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_markers_noise_nonnegative(bh, b0):
    if np.linalg.norm(b0) < 1e-3:
        return
    mk = overfit_markers(bh, b0)
    assert mk.v_hat >= 0
    assert mk.v_hat ** 2 == pytest.approx(
        np.dot(bh, bh) - mk.kappa_hat ** 2 * np.dot(b0, b0), abs=1e-9 * (1 + np.dot(bh, bh)))


# --- observable second moment versus RS theory ----------------------------------------------------

@pytest.fixture(scope="module")
def second_moment_study():
    zeta, n = 0.25, 400
    p = int(zeta * n)
    sol = solve_rs_quadrature(zeta, discretize(1.0, LL, UNIF4, n_atoms=2000), tol=1e-9)
    vals = []
    for r in range(60):
        data = generate_dataset(n, p, 1.0, LL, UNIF4, np.random.default_rng([31, r]))
        fit = fit_cox(data)
        vals.append(np.mean((data.covariates @ fit.beta_hat) ** 2))
    vals = np.array(vals)
    return zeta, sol, vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size)


@pytest.mark.slow
def test_second_moment_matches_rs_identity(second_moment_study):
    zeta, sol, mean, se = second_moment_study
    predicted = sol.w_star ** 2 + (1 - zeta) * sol.v_star ** 2
    assert abs(mean - predicted) <= 3 * se


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the (zeta - 1) v^2 + w^2 form has the wrong sign")
def test_second_moment_matches_stated_sign(second_moment_study):
    zeta, sol, mean, se = second_moment_study
    predicted = sol.w_star ** 2 + (zeta - 1) * sol.v_star ** 2
    assert abs(mean - predicted) <= 3 * se
