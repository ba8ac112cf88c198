"""Hidden Markov model definitions.

A model is an initial Gaussian mixture, a transition kernel whose law at
every state is a Gaussian mixture, and an opaque observation log-density.
Observations are bound into the model so that ``model.log_g(t, X)`` needs
only the time index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .gaussian import LOG_2PI, DimensionError, GaussianComponent, cholesky, mvn_logpdf, logsumexp


class ParameterError(ValueError):
    """Raised when model parameters fall outside their support."""


def _as_matrix(a, name: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and a.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {a.shape}")
    return a


def _check_pd(a: np.ndarray, name: str) -> np.ndarray:
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise ParameterError(f"{name} is not symmetric")
    try:
        return cholesky(a)
    except ValueError as exc:
        raise ParameterError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture with dense covariances."""

    log_weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        lw = np.atleast_1d(np.asarray(self.log_weights, dtype=float))
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        m, d = means.shape
        covs = covs.reshape(m, d, d)
        if lw.shape != (m,):
            raise DimensionError("one log-weight per component is required")
        lw = lw - logsumexp(lw)
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "chols", cholesky(covs))

    @classmethod
    def single(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(np.zeros(1), mean[None, :], np.atleast_2d(cov)[None])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(a, b, lw) for lw, a, b in zip(self.log_weights, self.means, self.covs)]

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        per = mvn_logpdf(x[:, None, :], self.means, self.chols) + self.log_weights
        return logsumexp(per, axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = rng.choice(self.log_weights.size, size=n, p=np.exp(self.log_weights))
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + np.einsum("nij,nj->ni", self.chols[k], z)


class TransitionKernel:
    """Transition density whose law at each state is a Gaussian mixture.

    Subclasses implement :meth:`components`, returning for a batch of states
    ``X`` of shape ``(n, d)`` the triple ``(log_weights, means, covs)`` with
    shapes ``(n, M)``, ``(n, M, d)`` and either ``(M, d, d)`` (covariances not
    depending on the state) or ``(n, M, d, d)``.
    """

    dim: int

    def components(self, X: np.ndarray):
        raise NotImplementedError

    def logpdf(self, x, x_new) -> np.ndarray:
        X = np.asarray(x, dtype=float).reshape(-1, self.dim)
        Xn = np.asarray(x_new, dtype=float).reshape(-1, self.dim)
        lw, means, covs = self.components(X)
        chols = cholesky(covs)
        if chols.ndim == 3:
            chols = chols[None]
        return logsumexp(lw + mvn_logpdf(Xn[:, None, :], means, chols), axis=1)

    def sample(self, rng: np.random.Generator, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        lw, means, covs = self.components(X)
        n, m = lw.shape
        if m == 1:
            k = np.zeros(n, dtype=int)
        else:
            k = np.argmax(lw + rng.gumbel(size=lw.shape), axis=1)
        chols = cholesky(covs)
        rows = np.arange(n)
        chol = chols[k] if chols.ndim == 3 else chols[rows, k]
        z = rng.standard_normal((n, self.dim))
        return means[rows, k] + np.einsum("nij,nj->ni", chol, z)


class AffineGaussianKernel(TransitionKernel):
    """``f(x, .) = sum_k w_k N(.; A_k x + b_k, B_k)`` with constant weights."""

    def __init__(self, weights, As, bs, Bs):
        self.As = np.asarray(As, dtype=float)
        if self.As.ndim == 2:
            self.As = self.As[None]
        m, d, _ = self.As.shape
        self.dim = d
        self.bs = np.asarray(bs, dtype=float).reshape(m, d)
        self.Bs = np.asarray(Bs, dtype=float).reshape(m, d, d)
        w = np.asarray(weights, dtype=float).reshape(m)
        if np.any(w <= 0):
            raise ParameterError("mixture weights must be positive")
        self.log_weights = np.log(w / w.sum())
        for B in self.Bs:
            _check_pd(B, "transition covariance")

    @classmethod
    def linear(cls, A, B, b=None) -> "AffineGaussianKernel":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = A.shape[0]
        b = np.zeros(d) if b is None else b
        return cls([1.0], A[None], np.reshape(b, (1, d)), np.atleast_2d(B)[None])

    def components(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        means = np.einsum("kij,nj->nki", self.As, X) + self.bs
        lw = np.broadcast_to(self.log_weights, (X.shape[0], self.log_weights.size))
        return lw, means, self.Bs

    def moments(self, mean: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of ``X'`` when ``X`` has the given moments."""
        w = np.exp(self.log_weights)
        comp_means = np.einsum("kij,j->ki", self.As, mean) + self.bs
        new_mean = w @ comp_means
        new_cov = np.zeros_like(cov)
        for wk, A, B, mk in zip(w, self.As, self.Bs, comp_means):
            new_cov += wk * (A @ cov @ A.T + B + np.outer(mk, mk))
        return new_mean, new_cov - np.outer(new_mean, new_mean)


class CallableKernel(TransitionKernel):
    """Wraps a user function ``X -> (log_weights, means, covs)``."""

    def __init__(self, dim: int, fn: Callable):
        self.dim = dim
        self._fn = fn

    def components(self, X):
        lw, means, covs = self._fn(np.asarray(X, dtype=float).reshape(-1, self.dim))
        lw = np.asarray(lw, dtype=float)
        return lw - logsumexp(lw, axis=1, keepdims=True), np.asarray(means), np.asarray(covs)


@dataclass(frozen=True)
class HmmModel:
    """Time-homogeneous HMM ``(mu, f, g)`` with observations bound in.

    ``log_obs(X, y)`` evaluates ``log g(x, y)`` for a batch of states and one
    observation; ``sample_obs(rng, X)`` draws one observation per state.
    ``kind`` tags the model family; linear-Gaussian models keep their
    matrices in ``params`` for the exact oracles.
    """

    initial: GaussianMixture
    transition: TransitionKernel
    log_obs: Callable
    dim_obs: int
    observations: np.ndarray | None = None
    sample_obs: Callable | None = None
    kind: str = "generic"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.initial.dim != self.transition.dim:
            raise DimensionError("initial and transition dimensions differ")
        if self.dim_obs < 1:
            raise DimensionError("observation dimension must be at least 1")
        if self.observations is not None:
            y = np.asarray(self.observations, dtype=float)
            if y.ndim == 1:
                y = y.reshape(-1, self.dim_obs) if self.dim_obs > 1 else y[:, None]
            if y.ndim != 2 or y.shape[1] != self.dim_obs or y.shape[0] < 1:
                raise DimensionError(f"observations must have shape (T, {self.dim_obs})")
            object.__setattr__(self, "observations", y)

    @property
    def dim_state(self) -> int:
        return self.initial.dim

    @property
    def T(self) -> int:
        if self.observations is None:
            raise ValueError("model has no observations bound")
        return self.observations.shape[0]

    @property
    def is_linear_gaussian(self) -> bool:
        return self.kind == "linear_gaussian"

    def with_observations(self, y) -> "HmmModel":
        return replace(self, observations=np.asarray(y, dtype=float))

    def log_g(self, t: int, X) -> np.ndarray:
        """``log g(x, y_t)`` for a batch of states; ``t`` is 1-based."""
        if not 1 <= t <= self.T:
            raise IndexError(f"time index {t} outside 1..{self.T}")
        X = np.asarray(X, dtype=float).reshape(-1, self.dim_state)
        return self.log_obs(X, self.observations[t - 1])

    def simulate(self, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw a latent path and observations of length ``T``."""
        if self.sample_obs is None:
            raise ValueError("model cannot simulate observations")
        x = np.empty((T, self.dim_state))
        x[0] = self.initial.sample(rng, 1)[0]
        for t in range(1, T):
            x[t] = self.transition.sample(rng, x[t - 1 : t])[0]
        y = np.vstack([self.sample_obs(rng, x[t : t + 1]) for t in range(T)])
        return x, y


def build_linear_gaussian(m, Sigma, A, B, C, D, observations=None) -> HmmModel:
    """``mu = N(m, Sigma)``, ``f(x, .) = N(Ax, B)``, ``g(x, .) = N(Cx, D)``."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    d = m.size
    Sigma = _as_matrix(Sigma, "Sigma", (d, d))
    A = _as_matrix(A, "A", (d, d))
    B = _as_matrix(B, "B", (d, d))
    C = _as_matrix(C, "C")
    if C.shape[1] != d:
        raise DimensionError(f"C must have {d} columns, got shape {C.shape}")
    dy = C.shape[0]
    D = _as_matrix(D, "D", (dy, dy))
    _check_pd(Sigma, "Sigma")
    _check_pd(B, "B")
    chol_D = _check_pd(D, "D")

    def log_obs(X, y):
        return mvn_logpdf(y, X @ C.T, chol_D)

    def sample_obs(rng, X):
        return X @ C.T + rng.standard_normal((X.shape[0], dy)) @ chol_D.T

    return HmmModel(
        initial=GaussianMixture.single(m, Sigma),
        transition=AffineGaussianKernel.linear(A, B),
        log_obs=log_obs,
        dim_obs=dy,
        observations=observations,
        sample_obs=sample_obs,
        kind="linear_gaussian",
        params=dict(m=m, Sigma=Sigma, A=A, B=B, C=C, D=D),
    )


def banded_ar_matrix(d: int, alpha: float) -> np.ndarray:
    """``A_ij = alpha^(|i-j|+1)``."""
    idx = np.arange(d)
    return alpha ** (np.abs(idx[:, None] - idx[None, :]) + 1.0)


def build_banded_ar_model(d: int, alpha: float, observations=None) -> HmmModel:
    """Linear-Gaussian family with ``m=0``, ``Sigma=B=C=D=I`` and banded ``A``."""
    eye = np.eye(d)
    return build_linear_gaussian(np.zeros(d), eye, banded_ar_matrix(d, alpha), eye, eye, eye, observations)


def _univariate_sv(alpha, sigma, beta, init_var, observations) -> HmmModel:
    def log_obs(X, y):
        var = beta**2 * np.exp(X[:, 0])
        return -0.5 * (LOG_2PI + np.log(var) + y[0] ** 2 / var)

    def sample_obs(rng, X):
        return beta * np.exp(0.5 * X) * rng.standard_normal(X.shape)

    return HmmModel(
        initial=GaussianMixture.single([0.0], [[init_var]]),
        transition=AffineGaussianKernel.linear([[alpha]], [[sigma**2]]),
        log_obs=log_obs,
        dim_obs=1,
        observations=observations,
        sample_obs=sample_obs,
        kind="univariate_sv",
        params=dict(alpha=alpha, sigma=sigma, beta=beta),
    )


def _check_sv(alpha, sigma, beta):
    if not 0 <= alpha < 1:
        raise ParameterError("alpha must lie in [0, 1)")
    if sigma <= 0 or beta <= 0:
        raise ParameterError("sigma and beta must be positive")


def build_univariate_sv(alpha: float, sigma: float, beta: float, observations=None) -> HmmModel:
    """Stochastic volatility model with initial variance ``sigma^2 / (1 - alpha)^2``.

    ``f(x, .) = N(alpha x, sigma^2)`` and ``g(x, .) = N(0, beta^2 exp(x))``.
    See :func:`build_univariate_sv_stationary` for the AR(1) stationary
    initial variance.
    """
    _check_sv(alpha, sigma, beta)
    return _univariate_sv(alpha, sigma, beta, sigma**2 / (1.0 - alpha) ** 2, observations)


def build_univariate_sv_stationary(alpha: float, sigma: float, beta: float, observations=None) -> HmmModel:
    """As :func:`build_univariate_sv` but with initial variance ``sigma^2 / (1 - alpha^2)``."""
    _check_sv(alpha, sigma, beta)
    return _univariate_sv(alpha, sigma, beta, sigma**2 / (1.0 - alpha**2), observations)


def stationary_covariance(phi, U) -> np.ndarray:
    """Solve ``V = diag(phi) V diag(phi) + U`` entrywise."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    return np.asarray(U, dtype=float) / (1.0 - np.outer(phi, phi))


def build_multivariate_sv(m, phi, U, observations=None) -> HmmModel:
    """Multivariate SV model with stationary initial law.

    ``mu = N(m, U_star)``, ``f(x, .) = N(m + diag(phi)(x - m), U)`` and
    ``g(x, .) = prod_i N(y_i; 0, exp(x_i))``.
    """
    m = np.atleast_1d(np.asarray(m, dtype=float))
    d = m.size
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if phi.shape != (d,):
        raise DimensionError("phi must have one entry per state coordinate")
    if np.any(np.abs(phi) >= 1):
        raise ParameterError("|phi_i| must be below 1")
    U = _as_matrix(U, "U", (d, d))
    _check_pd(U, "U")
    U_star = stationary_covariance(phi, U)
    _check_pd(U_star, "U_star")
    A = np.diag(phi)

    def log_obs(X, y):
        return -0.5 * np.sum(LOG_2PI + X + y**2 * np.exp(-X), axis=1)

    def sample_obs(rng, X):
        return np.exp(0.5 * X) * rng.standard_normal(X.shape)

    return HmmModel(
        initial=GaussianMixture.single(m, U_star),
        transition=AffineGaussianKernel([1.0], A[None], (m - A @ m)[None], U[None]),
        log_obs=log_obs,
        dim_obs=d,
        observations=observations,
        sample_obs=sample_obs,
        kind="multivariate_sv",
        params=dict(m=m, phi=phi, U=U, U_star=U_star),
    )


def band_covariance(diag, rho) -> np.ndarray:
    """Tridiagonal covariance from variances and adjacent correlations."""
    sd = np.sqrt(np.asarray(diag, dtype=float))
    U = np.diag(sd**2)
    for i, r in enumerate(np.asarray(rho, dtype=float)):
        U[i, i + 1] = U[i + 1, i] = r * sd[i] * sd[i + 1]
    return U


def load_observations_csv(path, dim_obs: int | None = None) -> np.ndarray:
    """Read a ``T x d'`` observation matrix; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if i == 0:
                    continue
                raise
    y = np.asarray(rows, dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise DimensionError("observation file is empty")
    if dim_obs is not None and y.shape[1] != dim_obs:
        raise DimensionError(f"expected {dim_obs} columns, found {y.shape[1]}")
    return y


def mean_corrected_returns(rates, scale: float = 100.0) -> np.ndarray:
    """Mean-corrected log returns ``scale * (dlog r_t - mean(dlog r))`` per column."""
    r = np.asarray(rates, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    ret = np.diff(np.log(r), axis=0)
    return scale * (ret - ret.mean(axis=0))
