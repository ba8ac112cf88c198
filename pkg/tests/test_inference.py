import csv
import json

import numpy as np
import pytest
from scipy import integrate

from twistsmc.filters import ParticleCollapseError
from twistsmc.hmm import build_linear_gaussian, build_banded_ar_model
from twistsmc.iapf import IapfConfig
from twistsmc.inference import (
    BpfEstimator,
    IapfEstimator,
    KalmanEstimator,
    MhConfig,
    Prior,
    adjusted_sample_size,
    autocovariance,
    beta,
    iact,
    improper_flat,
    inverse_gamma,
    log_acceptance_probability,
    monte_carlo_se,
    run_pmmh,
    symmetric_triangular,
    uniform,
)
from twistsmc.oracle import kalman_log_likelihood


def _alpha_model(T=30, seed=0, alpha=0.6):
    base = build_banded_ar_model(1, alpha)
    _, y = base.simulate(T, np.random.default_rng(seed))
    return lambda th: build_banded_ar_model(1, float(th[0]), observations=y)


class Counting:
    """Estimator wrapper recording every call."""

    def __init__(self, inner, fail_at=()):
        self.inner = inner
        self.calls = []
        self.fail_at = set(fail_at)

    def __call__(self, model, seed):
        self.calls.append(model.params["A"][0, 0])
        if len(self.calls) - 1 in self.fail_at:
            raise ParticleCollapseError(1)
        return self.inner(model, seed)


# priors


@pytest.mark.parametrize(
    "prior, lo, hi",
    [
        (uniform(-5.0, 5.0), -5.0, 5.0),
        (inverse_gamma(2.5, 0.025), 0.0, np.inf),
        (inverse_gamma(3.0, 1.0), 0.0, np.inf),
        (beta(20.0, 1.5), 0.0, 1.0),
        (symmetric_triangular(), -1.0, 1.0),
        (inverse_gamma(2.5, 0.025, squared=True), 0.0, np.inf),
    ],
)
def test_priors_integrate_to_one(prior, lo, hi):
    f = lambda x: np.exp(prior.log_density(x))  # noqa: E731
    pts = [1e-3, 0.05, 0.1, 0.16, 0.3, 1.0] if lo == 0.0 and hi == np.inf else None
    if hi == np.inf:
        total = integrate.quad(f, lo, 1.0, points=pts, limit=200)[0] + integrate.quad(f, 1.0, np.inf, limit=200)[0]
    else:
        total = integrate.quad(f, lo, hi, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-7)


def test_inverse_gamma_shape_scale_form():
    p = inverse_gamma(3.0, 1.0)
    # ratio of densities cancels the normalizer
    x1, x2 = 0.4, 1.3
    expected = (-4.0 * np.log(x1) - 1 / x1) - (-4.0 * np.log(x2) - 1 / x2)
    assert p.log_density(x1) - p.log_density(x2) == pytest.approx(expected, rel=1e-12)


def test_squared_prior_jacobian():
    base, sq = inverse_gamma(2.5, 0.025), inverse_gamma(2.5, 0.025, squared=True)
    s = 0.3
    assert sq.log_density(s) == pytest.approx(base.log_density(s * s) + np.log(2 * s), rel=1e-12)
    assert sq.log_density(-0.3) == -np.inf


def test_prior_supports():
    assert uniform(-5, 5).log_density(5.01) == -np.inf
    assert symmetric_triangular().log_density(0.0) == 0.0
    assert symmetric_triangular().log_density(1.0) == -np.inf
    assert beta(20, 1.5).log_density(1.0) == -np.inf
    assert improper_flat().log_density(1e300) == 0.0
    assert not improper_flat().in_support(np.inf)


def test_prior_validation():
    with pytest.raises(ValueError):
        Prior("gaussian")
    with pytest.raises(ValueError):
        uniform(1.0, 0.0)
    with pytest.raises(ValueError):
        inverse_gamma(-1.0, 1.0)
    with pytest.raises(ValueError):
        Prior("beta", (1.0,))


# acceptance


def test_equal_estimates_accept_surely():
    assert log_acceptance_probability(-12.3, 0.0, -12.3, 0.0) == 0.0


def test_acceptance_ratio():
    assert log_acceptance_probability(-10.0, -1.0, -9.0, -0.5) == pytest.approx(-1.5)
    assert log_acceptance_probability(-5.0, 0.0, -9.0, 0.0) == 0.0
    assert log_acceptance_probability(-np.inf, 0.0, -9.0, 0.0) == -np.inf


# run_pmmh


def test_config_validation():
    with pytest.raises(ValueError):
        MhConfig(0, (0.1,))
    with pytest.raises(ValueError):
        MhConfig(10, (0.0,))


def test_theta0_outside_support():
    with pytest.raises(ValueError):
        run_pmmh(_alpha_model(), [uniform(-0.5, 0.5)], [0.9], MhConfig(10, (0.1,)))


def test_out_of_support_never_calls_estimator():
    est = Counting(KalmanEstimator())
    chain = run_pmmh(_alpha_model(), [uniform(0.5, 0.7)], [0.6], MhConfig(300, (0.5,), est, seed=1))
    assert all(0.5 <= a <= 0.7 for a in est.calls)
    assert chain.estimator_calls == len(est.calls) < 301
    assert np.all((chain.samples >= 0.5) & (chain.samples <= 0.7))


def test_kalman_chain_is_reproducible():
    cfg = MhConfig(400, (0.1,), KalmanEstimator(), seed=5)
    a = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], cfg)
    b = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], cfg)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.log_z, b.log_z)


def test_cached_estimate_changes_only_on_acceptance():
    chain = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], MhConfig(500, (0.2,), BpfEstimator(50), seed=2))
    moved = np.diff(chain.samples[:, 0]) != 0
    changed = np.diff(chain.log_z) != 0
    np.testing.assert_array_equal(moved, changed)
    assert moved.sum() == chain.accepted[0] - (chain.samples[0, 0] != 0.3)


def test_cached_estimate_is_never_refreshed():
    # repeated proposals at the current point do not re-estimate the current state
    chain = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], MhConfig(300, (1e-3,), BpfEstimator(20), seed=4))
    runs = np.split(chain.log_z, np.flatnonzero(np.diff(chain.samples[:, 0])) + 1)
    assert all(np.all(r == r[0]) for r in runs)


def test_estimator_failure_is_rejection():
    est = Counting(KalmanEstimator(), fail_at={1, 2, 3})
    chain = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], MhConfig(10, (0.1,), est, seed=0))
    assert chain.failures == 3
    np.testing.assert_array_equal(chain.samples[:3, 0], 0.3)


def test_failure_at_start_raises():
    with pytest.raises(ValueError):
        run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], MhConfig(10, (0.1,), Counting(KalmanEstimator(), fail_at={0})))


def test_component_order_is_cyclic():
    y = build_banded_ar_model(1, 0.5).simulate(20, np.random.default_rng(0))[1]

    def builder(th):
        return build_linear_gaussian([0.0], [[1.0]], [[th[0]]], [[th[1] ** 2]], [[1.0]], [[1.0]], observations=y)

    chain = run_pmmh(builder, [uniform(-1, 1), uniform(0.1, 3)], [0.5, 1.0], MhConfig(200, (0.2, 0.2), seed=3))
    assert chain.proposed.tolist() == [100, 100]
    changes = np.diff(chain.samples, axis=0) != 0
    # odd steps move only the first component, even steps only the second
    assert not changes[0::2, 0].any() and not changes[1::2, 1].any()


def test_kalman_mh_matches_grid_posterior():
    builder = _alpha_model(T=40, seed=3)
    grid = np.linspace(-0.99, 0.99, 801)
    ll = np.array([kalman_log_likelihood(builder([a])).log_likelihood for a in grid])
    w = np.exp(ll - ll.max())
    truth = (w @ grid) / w.sum()
    chain = run_pmmh(builder, [uniform(-0.99, 0.99)], [0.5], MhConfig(8000, (0.3,), seed=11))
    x = chain.samples[500:, 0]
    assert abs(x.mean() - truth) < 4 * monte_carlo_se(x)


def test_estimators_agree_on_scale():
    model = _alpha_model(T=20)([0.5])
    truth = KalmanEstimator()(model)
    seed = np.random.SeedSequence(1)
    assert abs(BpfEstimator(2000)(model, seed) - truth) < 0.3
    assert abs(IapfEstimator(IapfConfig(n0=200, k=2))(model, seed) - truth) < 0.3


def test_chain_outputs(tmp_path):
    chain = run_pmmh(_alpha_model(), [uniform(-5, 5)], [0.3], MhConfig(300, (0.2,), seed=1), names=["alpha"])
    chain.write_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["step", "alpha", "log_z"]
    assert len(rows) == 301
    assert float(rows[-1][1]) == chain.samples[-1, 0]
    chain.write_summary(tmp_path / "s.json")
    summary = json.load(open(tmp_path / "s.json"))
    comp = summary["components"][0]
    assert comp["name"] == "alpha"
    assert comp["mean"] == pytest.approx(chain.samples[:, 0].mean())
    assert 0 <= comp["acceptance_rate"] <= 1
    assert comp["adjusted_sample_size"] == pytest.approx(300 / comp["iact"])


# diagnostics


def test_autocovariance_matches_direct():
    x = np.random.default_rng(0).normal(size=50)
    xc = x - x.mean()
    direct = np.array([xc[: 50 - k] @ xc[k:] / 50 for k in range(50)])
    np.testing.assert_allclose(autocovariance(x), direct, atol=1e-12)


def test_iact_iid():
    x = np.random.default_rng(1).normal(size=100_000)
    assert 0.9 <= iact(x) <= 1.1


def test_iact_ar1():
    rng = np.random.default_rng(2)
    rho, n = 0.5, 100_000
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - rho**2)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    assert iact(x) == pytest.approx(3.0, rel=0.2)
    assert adjusted_sample_size(x) == pytest.approx(n / iact(x))


def test_iact_errors():
    with pytest.raises(ValueError):
        iact(np.ones(500))
    with pytest.raises(ValueError):
        iact(np.arange(50.0))


def test_monte_carlo_se_iid():
    x = np.random.default_rng(3).normal(size=10_000)
    assert monte_carlo_se(x) == pytest.approx(0.01, rel=0.1)
