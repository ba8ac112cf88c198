import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistsmc.filters import FilterConfig, run_bpf, run_psi_apf
from twistsmc.gaussian import DimensionError, GaussianComponent
from twistsmc.hmm import build_linear_gaussian, build_banded_ar_model
from twistsmc.learn import (
    FitConfig,
    FitError,
    FitProblem,
    approximate_psi_sequence,
    backward_targets,
    fit_gaussian,
    fit_psi,
    regularizer_constant,
)
from twistsmc.oracle import kalman_log_likelihood
from twistsmc.twist import PsiFunction, exact_psi_star_lgssm


def _banded(d, T, seed=0, alpha=0.42):
    model = build_banded_ar_model(d, alpha)
    _, y = model.simulate(T, np.random.default_rng(seed))
    return model.with_observations(y)


def _log_normal_diag(X, m, v):
    return -0.5 * np.sum((X - m) ** 2 / v + np.log(2 * np.pi * v), axis=1)


def _profile_mu(fit, problem):
    # closed-form scale for fixed (m, Sigma), computed from scratch
    X, lt = problem.support_points, problem.log_targets
    diff = X - fit.mean
    maha = np.sum(diff * np.linalg.solve(fit.cov, diff.T).T, axis=1)
    log_n = -0.5 * (maha + np.linalg.slogdet(2 * np.pi * fit.cov)[1])
    n, psi = np.exp(log_n), np.exp(lt)
    return (n @ psi) / (n @ n)


# FitConfig and FitProblem


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(max_gauss_newton_iters=0)
    with pytest.raises(ValueError):
        FitConfig(param_tolerance=0.0)
    with pytest.raises(ValueError):
        FitConfig(regularizer="no_such_rule")
    with pytest.raises(ValueError):
        FitConfig(regularizer=-1.0)
    with pytest.raises(ValueError):
        FitConfig(regularizer=True)
    assert FitConfig(regularizer=0.25).regularizer == 0.25


def test_problem_validation():
    with pytest.raises(DimensionError):
        FitProblem(np.zeros((5, 1)), np.zeros(4))
    with pytest.raises(FitError):
        FitProblem(np.zeros((5, 1)), [0.0, 0.0, np.nan, 0.0, 0.0])
    with pytest.raises(FitError):
        FitProblem(np.zeros((5, 1)), np.full(5, -np.inf))


def test_too_few_points():
    X = np.random.default_rng(0).normal(size=(3, 2))
    with pytest.raises(FitError):
        fit_gaussian(FitProblem(X, np.zeros(3)))


# fit_gaussian


@pytest.mark.parametrize("d", [1, 3])
def test_recovers_exact_scaled_gaussian(d):
    rng = np.random.default_rng(d)
    m0 = rng.normal(size=d)
    v0 = rng.uniform(0.5, 2.0, d)
    X = m0 + rng.normal(scale=1.5, size=(500, d))
    lt = np.log(3.7) + _log_normal_diag(X, m0, v0)
    fit = fit_gaussian(FitProblem(X, lt))
    np.testing.assert_allclose(fit.mean, m0, atol=1e-4)
    np.testing.assert_allclose(np.diag(fit.cov), v0, rtol=1e-3)
    assert fit.objective < 1e-10
    # lambda * psi = N, so lambda = 1 / 3.7
    assert fit.log_lambda == pytest.approx(-np.log(3.7), abs=1e-6)


def test_recovers_scaled_gaussian_from_moment_start():
    # targets far off the support centre exercise the optimizer, not just the start
    rng = np.random.default_rng(11)
    X = rng.normal(size=(400, 2))
    m0, v0 = np.array([0.8, -0.5]), np.array([0.6, 1.4])
    lt = _log_normal_diag(X, m0, v0) - 40.0
    fit = fit_gaussian(FitProblem(X, lt))
    np.testing.assert_allclose(fit.mean, m0, atol=1e-4)
    np.testing.assert_allclose(np.diag(fit.cov), v0, rtol=1e-3)


def test_recovers_full_covariance():
    rng = np.random.default_rng(5)
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    m0 = np.array([0.3, -0.2])
    X = rng.normal(scale=1.5, size=(500, 2))
    diff = X - m0
    lt = -0.5 * np.sum(diff * np.linalg.solve(S, diff.T).T, axis=1)
    fit = fit_gaussian(FitProblem(X, lt), FitConfig(diagonal_only=False))
    np.testing.assert_allclose(fit.mean, m0, atol=1e-4)
    np.testing.assert_allclose(fit.cov, S, rtol=1e-3, atol=1e-4)


def test_flat_targets_fall_back_to_moments():
    X = np.random.default_rng(2).normal(size=(50, 2))
    fit = fit_gaussian(FitProblem(X, np.full(50, -3.0)))
    assert fit.degenerate
    np.testing.assert_allclose(fit.mean, X.mean(axis=0))
    np.testing.assert_allclose(np.diag(fit.cov), X.var(axis=0), rtol=1e-12)
    psi = fit_psi(FitProblem(X, np.full(50, -3.0)), 50)
    assert np.all(np.isfinite(psi.log_eval(X)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_objective_history_is_monotone_and_beats_moments(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=rng.uniform(0.5, 3.0), size=(int(rng.integers(d + 2, 200)), d))
    # a noisy, non-Gaussian target surface
    lt = -0.5 * np.sum((X - rng.normal(size=d)) ** 2 / rng.uniform(0.3, 3.0, d), axis=1)
    lt += rng.normal(scale=0.5, size=lt.size) + rng.normal(scale=20.0)
    fit = fit_gaussian(FitProblem(X, lt), FitConfig(diagonal_only=bool(rng.random() < 0.5)))
    h = np.asarray(fit.history)
    assert np.all(np.diff(h) <= 0)
    assert fit.objective == h[-1]
    assert fit.objective <= fit.initial_objective * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lambda_matches_closed_form_profile(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    X = rng.normal(size=(100, d))
    lt = -0.5 * np.sum(X**2, axis=1) + 0.3 * np.sin(3 * X[:, 0])
    problem = FitProblem(X, lt)
    fit = fit_gaussian(problem)
    mu = _profile_mu(fit, problem)
    assert fit.log_lambda == pytest.approx(-np.log(mu), abs=1e-10)


def test_target_scale_only_moves_lambda():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 2))
    lt = -0.5 * np.sum(X**2 / [0.7, 1.9], axis=1) + 0.2 * np.cos(X[:, 1])
    a = fit_gaussian(FitProblem(X, lt))
    b = fit_gaussian(FitProblem(X, lt + 123.4))
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-8)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-8)
    assert b.log_lambda == pytest.approx(a.log_lambda - 123.4, abs=1e-8)


# fit_psi and the regularizer


@pytest.mark.parametrize("rule", ["peak_over_N", "mass_over_N", 0.01])
def test_psi_bounded_below_by_constant(rule):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 2))
    problem = FitProblem(X, -0.5 * np.sum(X**2, axis=1))
    config = FitConfig(regularizer=rule)
    psi = fit_psi(problem, 100, config)
    fit = fit_gaussian(problem, config)
    c = regularizer_constant(100, fit, problem, config)
    assert c > 0
    far = np.array([[1e3, -1e3], [50.0, 50.0]])
    np.testing.assert_allclose(psi.log_eval(far), np.log(c), rtol=1e-10)
    grid = rng.normal(scale=5.0, size=(1000, 2))
    assert np.all(psi.log_eval(grid) >= np.log(c) - 1e-12)
    assert len(psi.components) == 1 and psi.constant > 0


def test_peak_over_n_constant():
    X = np.random.default_rng(7).normal(size=(80, 3))
    problem = FitProblem(X, -0.5 * np.sum(X**2, axis=1))
    config = FitConfig(regularizer="peak_over_N")
    fit = fit_gaussian(problem, config)
    peak = np.exp(-0.5 * np.linalg.slogdet(2 * np.pi * fit.cov)[1])
    assert regularizer_constant(80, fit, problem, config) == pytest.approx(peak / 80, rel=1e-12)


def test_fixed_constant():
    X = np.random.default_rng(7).normal(size=(80, 1))
    problem = FitProblem(X, -0.5 * X[:, 0] ** 2)
    config = FitConfig(regularizer=0.05)
    fit = fit_gaussian(problem, config)
    assert regularizer_constant(80, fit, problem, config) == pytest.approx(0.05, rel=1e-12)
    psi = fit_psi(problem, 80, config)
    assert np.exp(psi.log_eval([[1e4]])[0]) == pytest.approx(0.05, rel=1e-10)


def test_mass_over_n_uses_predictive_mass():
    X = np.random.default_rng(8).normal(size=(60, 1))
    lt = -0.5 * X[:, 0] ** 2
    config = FitConfig(regularizer="mass_over_N")
    problem = FitProblem(X, lt, lambda psi: np.log(0.25))
    fit = fit_gaussian(problem, config)
    peak = np.exp(-0.5 * np.linalg.slogdet(2 * np.pi * fit.cov)[1])
    assert regularizer_constant(60, fit, problem, config) == pytest.approx(0.25 * peak / 60, rel=1e-12)
    # the relative mass is capped at the peak
    capped = FitProblem(X, lt, lambda psi: np.log(5.0))
    assert regularizer_constant(60, fit, capped, config) == pytest.approx(peak / 60, rel=1e-12)


def test_fit_psi_shape_matches_config():
    X = np.random.default_rng(9).normal(size=(60, 2))
    problem = FitProblem(X, -0.5 * np.sum(X**2, axis=1))
    assert fit_psi(problem, 60).components[0].diagonal
    assert not fit_psi(problem, 60, FitConfig(diagonal_only=False)).components[0].diagonal


# backward_targets


def test_targets_at_final_time_are_g():
    model = _banded(2, 4)
    X = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(backward_targets(model, 4, X, None), model.log_g(4, X), atol=1e-14)


def test_targets_with_constant_next_psi():
    model = _banded(2, 4)
    X = np.random.default_rng(0).normal(size=(10, 2))
    got = backward_targets(model, 2, X, PsiFunction.constant_fn(2, 2.5))
    np.testing.assert_allclose(got, np.log(2.5) + model.log_g(2, X), atol=1e-12)


def test_targets_from_exact_psi_star_are_psi_star():
    model = _banded(2, 6, seed=4)
    star, _ = exact_psi_star_lgssm(model)
    X = np.random.default_rng(1).normal(scale=2.0, size=(50, 2))
    for t in range(1, 6):
        got = backward_targets(model, t, X, star[t + 1])
        np.testing.assert_allclose(got, star[t].log_eval(X), atol=1e-9)


def test_targets_shift_with_next_psi_scale():
    model = _banded(2, 4)
    X = np.random.default_rng(3).normal(size=(30, 2))
    psi = PsiFunction(2, 0.1, [GaussianComponent([0.5, -0.5], [1.0, 2.0], 0.0, diagonal=True)])
    a = backward_targets(model, 2, X, psi)
    b = backward_targets(model, 2, X, psi.rescaled(17.0))
    np.testing.assert_allclose(b - a, 17.0, atol=1e-10)
    fa, fb = fit_gaussian(FitProblem(X, a)), fit_gaussian(FitProblem(X, b))
    np.testing.assert_allclose(fa.mean, fb.mean, atol=1e-8)
    np.testing.assert_allclose(fa.cov, fb.cov, rtol=1e-8)


def test_targets_dimension_checked():
    model = _banded(2, 3)
    with pytest.raises(DimensionError):
        backward_targets(model, 1, np.zeros((4, 2)), PsiFunction.constant_fn(3))


# approximate_psi_sequence


def test_sequence_structure():
    model = _banded(2, 12)
    out = run_bpf(model, FilterConfig(200, seed=1))
    psi = approximate_psi_sequence(model, out)
    assert len(psi) == 12
    for t in range(1, 13):
        assert psi[t].dim == 2 and psi[t].constant > 0 and len(psi[t].components) == 1


def test_single_step_fits_g():
    model = build_linear_gaussian([0.0], [[1.0]], [[0.5]], [[1.0]], [[1.0]], [[0.5]], observations=[[0.7]])
    out = run_bpf(model, FilterConfig(300, seed=0))
    psi = approximate_psi_sequence(model, out)
    # g(x) = N(0.7; x, 0.5) is a Gaussian in x with mean 0.7 and variance 0.5
    comp = psi[1].components[0]
    assert comp.mean[0] == pytest.approx(0.7, abs=1e-6)
    assert np.ravel(comp.cov)[0] == pytest.approx(0.5, rel=1e-5)


def test_length_mismatch_rejected():
    model = _banded(1, 5)
    out = run_bpf(_banded(1, 6), FilterConfig(20, seed=0))
    with pytest.raises(DimensionError):
        approximate_psi_sequence(model, out)


def test_fitted_psi_beats_bpf():
    model = _banded(1, 100, seed=21)
    log_z = kalman_log_likelihood(model).log_likelihood
    psi = approximate_psi_sequence(model, run_bpf(model, FilterConfig(1000, seed=0)))
    cfg = lambda s: FilterConfig(1000, seed=s, record_ancestry=False)  # noqa: E731
    apf = np.array([np.exp(run_psi_apf(model, psi, cfg(s)).log_z - log_z) for s in range(1, 101)])
    bpf = np.array([np.exp(run_bpf(model, cfg(s)).log_z - log_z) for s in range(1, 101)])
    assert apf.std(ddof=1) < bpf.std(ddof=1)
