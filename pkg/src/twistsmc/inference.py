"""Particle marginal Metropolis-Hastings and chain diagnostics.

Chains update one parameter component per step with a Gaussian random walk.
The likelihood estimate of the current state is cached and only replaced when
a proposal is accepted, which makes the chain an exact pseudo-marginal sampler
whenever the estimator is unbiased.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .filters import FilterConfig, ParticleCollapseError, run_bpf
from .gaussian import NotPositiveDefiniteError
from .hmm import HmmModel, ParameterError
from .iapf import IapfConfig, IterationLimitError, ParticleLimitError, run_iapf
from .learn import FitError
from .oracle import OracleError, kalman_log_likelihood

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Prior:
    """Scalar prior; ``log_density`` is ``-inf`` outside the support.

    ``inverse_gamma`` uses the shape-scale form with density proportional to
    ``x^(-shape-1) exp(-scale/x)``. ``squared=True`` places the prior on
    ``theta^2`` for ``theta > 0`` and includes the Jacobian ``2 theta``.
    """

    kind: str
    params: tuple = ()
    squared: bool = False

    KINDS = ("uniform", "inverse_gamma", "beta", "symmetric_triangular", "improper_flat")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        need = {"uniform": 2, "inverse_gamma": 2, "beta": 2, "symmetric_triangular": 0, "improper_flat": 0}[self.kind]
        if len(p) != need:
            raise ValueError(f"{self.kind} prior takes {need} parameters")
        if self.kind == "uniform" and not p[0] < p[1]:
            raise ValueError("uniform prior needs a < b")
        if self.kind in ("inverse_gamma", "beta") and min(p) <= 0:
            raise ValueError(f"{self.kind} prior parameters must be positive")

    def _base_log_density(self, x: float) -> float:
        k, p = self.kind, self.params
        if k == "improper_flat":
            return 0.0 if np.isfinite(x) else -np.inf
        if k == "uniform":
            return -np.log(p[1] - p[0]) if p[0] <= x <= p[1] else -np.inf
        if k == "symmetric_triangular":
            return float(np.log1p(-abs(x))) if abs(x) < 1 else -np.inf
        if k == "inverse_gamma":
            return float(stats.invgamma.logpdf(x, p[0], scale=p[1])) if x > 0 else -np.inf
        return float(stats.beta.logpdf(x, p[0], p[1])) if 0 < x < 1 else -np.inf

    def log_density(self, theta: float) -> float:
        theta = float(theta)
        if not np.isfinite(theta):
            return -np.inf
        if self.squared:
            if theta <= 0:
                return -np.inf
            return self._base_log_density(theta * theta) + float(np.log(2.0 * theta))
        return self._base_log_density(theta)

    def in_support(self, theta: float) -> bool:
        return bool(np.isfinite(self.log_density(theta)))


def uniform(a: float, b: float) -> Prior:
    return Prior("uniform", (a, b))


def inverse_gamma(shape: float, scale: float, squared: bool = False) -> Prior:
    return Prior("inverse_gamma", (shape, scale), squared)


def beta(a: float, b: float) -> Prior:
    return Prior("beta", (a, b))


def symmetric_triangular() -> Prior:
    return Prior("symmetric_triangular")


def improper_flat() -> Prior:
    return Prior("improper_flat")


# ---------------------------------------------------------------------------
# likelihood estimators

ESTIMATOR_FAILURES = (
    ParticleCollapseError,
    IterationLimitError,
    ParticleLimitError,
    FitError,
    OracleError,
    ParameterError,
    NotPositiveDefiniteError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


@dataclass(frozen=True)
class BpfEstimator:
    n_particles: int
    kappa: float = 0.5
    name: str = "bpf"

    def __call__(self, model: HmmModel, seed: np.random.SeedSequence) -> float:
        cfg = FilterConfig(self.n_particles, self.kappa, record_ancestry=False)
        return run_bpf(model, cfg, np.random.default_rng(seed)).log_z


@dataclass(frozen=True)
class IapfEstimator:
    config: IapfConfig = IapfConfig()
    name: str = "iapf"

    def __call__(self, model: HmmModel, seed: np.random.SeedSequence) -> float:
        s = int(seed.generate_state(1, np.uint64)[0])
        return run_iapf(model, dataclasses.replace(self.config, seed=s)).log_z


@dataclass(frozen=True)
class KalmanEstimator:
    name: str = "kalman"

    def __call__(self, model: HmmModel, seed=None) -> float:
        return kalman_log_likelihood(model).log_likelihood


@dataclass(frozen=True)
class MhConfig:
    chain_length: int
    proposal_sd: tuple
    estimator: Callable = KalmanEstimator()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "proposal_sd", tuple(float(s) for s in np.atleast_1d(self.proposal_sd)))
        if self.chain_length < 1:
            raise ValueError("chain_length must be at least 1")
        if any(not s > 0 for s in self.proposal_sd):
            raise ValueError("proposal standard deviations must be positive")


@dataclass
class Chain:
    """One row of ``samples`` per component update."""

    samples: np.ndarray
    log_z: np.ndarray
    accepted: np.ndarray
    proposed: np.ndarray
    names: list = field(default_factory=list)
    estimator_calls: int = 0
    failures: int = 0

    @property
    def acceptance_rates(self) -> np.ndarray:
        return np.divide(self.accepted, np.maximum(self.proposed, 1))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *self.names, "log_z"])
            for i, (row, lz) in enumerate(zip(self.samples, self.log_z)):
                w.writerow([i, *(repr(float(v)) for v in row), repr(float(lz))])

    def summary(self, burn_in: int = 0) -> dict:
        post = self.samples[burn_in:]
        out = {
            "chain_length": int(self.samples.shape[0]),
            "estimator_calls": self.estimator_calls,
            "failures": self.failures,
            "components": [],
        }
        for j, name in enumerate(self.names):
            x = post[:, j]
            entry = {
                "name": name,
                "mean": float(x.mean()),
                "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
                "acceptance_rate": float(self.acceptance_rates[j]),
            }
            try:
                tau = iact(x)
                entry.update(iact=tau, adjusted_sample_size=x.size / tau)
            except ValueError:
                entry.update(iact=None, adjusted_sample_size=None)
            out["components"].append(entry)
        return out

    def write_summary(self, path, burn_in: int = 0) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(burn_in), fh, indent=2, sort_keys=True)


def log_acceptance_probability(log_z_new, log_prior_new, log_z_cur, log_prior_cur) -> float:
    """``min(0, log ratio)`` for a symmetric proposal."""
    diff = (log_z_new + log_prior_new) - (log_z_cur + log_prior_cur)
    if np.isnan(diff):
        return -np.inf
    return float(min(0.0, diff))


def _safe_estimate(estimator, model_builder, theta, seed) -> float | None:
    try:
        lz = float(estimator(model_builder(theta), seed))
    except ESTIMATOR_FAILURES as exc:
        log.warning("likelihood estimator failed at %s: %s", np.array2string(theta), exc)
        return None
    if np.isnan(lz) or lz == np.inf:
        log.warning("likelihood estimator returned %s at %s", lz, np.array2string(theta))
        return None
    return lz


def run_pmmh(
    model_builder: Callable[[np.ndarray], HmmModel],
    priors: Sequence[Prior],
    theta0,
    config: MhConfig,
    names: Sequence[str] | None = None,
) -> Chain:
    """Component-wise random-walk PMMH.

    Step ``s`` updates component ``s mod p``. The estimator at step ``s`` gets
    its own seed sequence keyed by ``(config.seed, s + 1)``; the initial
    estimate uses key ``(config.seed, 0)``.
    """
    theta = np.array(theta0, dtype=float).reshape(-1)
    p = theta.size
    if len(priors) != p or len(config.proposal_sd) != p:
        raise ValueError("priors, proposal_sd and theta0 must have the same length")
    log_prior = np.array([pr.log_density(v) for pr, v in zip(priors, theta)])
    if not np.all(np.isfinite(log_prior)):
        raise ValueError("theta0 lies outside the prior support")
    names = list(names) if names is not None else [f"theta{j}" for j in range(p)]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0, 1]))

    calls = 1
    lz = _safe_estimate(config.estimator, model_builder, theta, np.random.SeedSequence([config.seed, 0]))
    if lz is None:
        raise ValueError("likelihood estimator failed at theta0")
    L = config.chain_length
    samples = np.empty((L, p))
    log_zs = np.empty(L)
    accepted = np.zeros(p, dtype=np.int64)
    proposed = np.zeros(p, dtype=np.int64)
    failures = 0
    for s in range(L):
        j = s % p
        proposed[j] += 1
        cand = theta.copy()
        cand[j] += config.proposal_sd[j] * rng.standard_normal()
        u = rng.random()
        lp_new = priors[j].log_density(cand[j])
        if np.isfinite(lp_new):
            calls += 1
            lz_new = _safe_estimate(config.estimator, model_builder, cand, np.random.SeedSequence([config.seed, s + 1]))
            if lz_new is None:
                failures += 1
            elif np.log(u) < log_acceptance_probability(lz_new, lp_new, lz, log_prior[j]):
                theta, lz = cand, lz_new
                log_prior[j] = lp_new
                accepted[j] += 1
        samples[s] = theta
        log_zs[s] = lz
    return Chain(samples, log_zs, accepted, proposed, names, calls, failures)


# ---------------------------------------------------------------------------
# diagnostics


def autocovariance(x) -> np.ndarray:
    """Biased sample autocovariances at all lags via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def iact(samples) -> float:
    """Integrated autocorrelation time by the initial positive sequence estimator."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < 100:
        raise ValueError("iact needs at least 100 samples")
    gamma = autocovariance(x)
    if not gamma[0] > 0 or np.ptp(x) == 0:
        raise ValueError("iact is undefined for a constant sequence")
    m = gamma.size // 2
    pairs = gamma[: 2 * m : 2] + gamma[1 : 2 * m : 2]
    stop = np.flatnonzero(pairs <= 0)
    pairs = pairs[: stop[0]] if stop.size else pairs
    return float(max((-gamma[0] + 2.0 * pairs.sum()) / gamma[0], 1e-12))


def adjusted_sample_size(samples) -> float:
    x = np.asarray(samples).reshape(-1)
    return x.size / iact(x)


def monte_carlo_se(samples) -> float:
    """Standard error of the sample mean accounting for autocorrelation."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    return float(np.sqrt(x.var(ddof=1) * iact(x) / x.size))
