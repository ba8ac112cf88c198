"""Exact references: Kalman filtering/smoothing and 1-D grid quadrature.

The grid routines work for any one-dimensional model whose transition
exposes a log-density, and use only the trapezoidal rule; they share no code
path with the closed-form twisting machinery they are used to check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .gaussian import LOG_2PI
from .hmm import AffineGaussianKernel, HmmModel
from .twist import PsiSequence


class OracleError(ValueError):
    """Raised when an oracle is not applicable or fails its own diagnostics."""


@dataclass
class KalmanResult:
    pred_means: np.ndarray
    pred_covs: np.ndarray
    filt_means: np.ndarray
    filt_covs: np.ndarray
    smooth_means: np.ndarray
    smooth_covs: np.ndarray
    log_likelihood: float


def _psd_check(P: np.ndarray, what: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(P).min() < -1e-10 * max(1.0, np.abs(P).max()):
        raise OracleError(f"{what} covariance lost positive semi-definiteness")
    return P


def kalman_log_likelihood(model: HmmModel) -> KalmanResult:
    """Kalman filter (Joseph-form update) and Rauch-Tung-Striebel smoother."""
    if not model.is_linear_gaussian:
        raise OracleError("Kalman oracle needs a linear-Gaussian model")
    p = model.params
    A, B, C, D = p["A"], p["B"], p["C"], p["D"]
    y = model.observations
    if y.shape[1] != C.shape[0]:
        raise OracleError("observation dimension does not match C")
    T, d = y.shape[0], model.dim_state
    pm, pc = np.empty((T, d)), np.empty((T, d, d))
    fm, fc = np.empty((T, d)), np.empty((T, d, d))
    m, P = p["m"].copy(), p["Sigma"].copy()
    eye = np.eye(d)
    loglik = 0.0
    for t in range(T):
        pm[t], pc[t] = m, P
        S = C @ P @ C.T + D
        S = 0.5 * (S + S.T)
        resid = y[t] - C @ m
        chol = np.linalg.cholesky(S)
        z = np.linalg.solve(chol, resid)
        loglik += -0.5 * (z @ z) - np.sum(np.log(np.diag(chol))) - 0.5 * y.shape[1] * LOG_2PI
        K = np.linalg.solve(S, C @ P).T
        m = m + K @ resid
        I_KC = eye - K @ C
        P = _psd_check(I_KC @ P @ I_KC.T + K @ D @ K.T, "filtered")
        fm[t], fc[t] = m, P
        m = A @ m
        P = _psd_check(A @ P @ A.T + B, "predicted")
    sm, sc = fm.copy(), fc.copy()
    for t in range(T - 2, -1, -1):
        G = np.linalg.solve(pc[t + 1], A @ fc[t]).T
        sm[t] = fm[t] + G @ (sm[t + 1] - pm[t + 1])
        sc[t] = _psd_check(fc[t] + G @ (sc[t + 1] - pc[t + 1]) @ G.T, "smoothed")
    return KalmanResult(pm, pc, fm, fc, sm, sc, float(loglik))


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    n_nodes: int = 2048

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if self.n_nodes < 16:
            raise ValueError("grid needs at least 16 nodes")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_nodes)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n_nodes - 1)

    @property
    def log_weights(self) -> np.ndarray:
        """Log trapezoidal weights."""
        w = np.full(self.n_nodes, self.spacing)
        w[[0, -1]] *= 0.5
        return np.log(w)

    def refined(self) -> "Grid1D":
        """Same interval with half the spacing."""
        return Grid1D(self.lo, self.hi, 2 * self.n_nodes - 1)


def default_grid(model: HmmModel, n_nodes: int = 2048, width: float = 10.0) -> Grid1D:
    """Cover the prior marginals of ``X_1..X_T`` by ``width`` standard deviations."""
    if model.dim_state != 1:
        raise OracleError("grid oracles are one-dimensional")
    kernel = model.transition
    if not isinstance(kernel, AffineGaussianKernel):
        raise OracleError("default grid needs an affine Gaussian kernel; pass a Grid1D")
    w = np.exp(model.initial.log_weights)
    mean = w @ model.initial.means
    cov = np.einsum("k,kij->ij", w, model.initial.covs + np.einsum("ki,kj->kij", model.initial.means, model.initial.means))
    cov = cov - np.outer(mean, mean)
    lo, hi = np.inf, -np.inf
    for _ in range(model.T):
        sd = float(np.sqrt(cov[0, 0]))
        lo, hi = min(lo, mean[0] - width * sd), max(hi, mean[0] + width * sd)
        mean, cov = kernel.moments(mean, cov)
    return Grid1D(float(lo), float(hi), n_nodes)


def _tables(model: HmmModel, grid: Grid1D):
    if model.dim_state != 1:
        raise OracleError("grid oracles are one-dimensional")
    x = grid.nodes[:, None]
    n = grid.n_nodes
    log_mu = model.initial.logpdf(x)
    log_f = model.transition.logpdf(np.repeat(x, n, axis=0), np.tile(x, (n, 1))).reshape(n, n)
    log_g = np.stack([model.log_g(t, x) for t in range(1, model.T + 1)])
    return log_mu, log_f, log_g, grid.log_weights


def _propagate(log_filt, log_f, log_w):
    """``x_j -> log integral filt(x) f(x, x_j) dx`` by quadrature."""
    return logsumexp((log_filt + log_w)[:, None] + log_f, axis=0)


def _forward(log_init, log_f, log_g, log_w, check: bool = True):
    """Normalized predictive/filtering tables and per-step log normalizers."""
    T, n = log_g.shape
    pred = np.empty((T, n))
    filt = np.empty((T, n))
    log_norm = np.empty(T)
    cur = log_init
    for t in range(T):
        mass = logsumexp(cur + log_w)
        if check and abs(mass) > 1e-6:
            raise OracleError(f"grid does not hold the predictive mass at step {t + 1} (log mass {mass:.3g})")
        pred[t] = cur - mass
        a = pred[t] + log_g[t]
        log_norm[t] = logsumexp(a + log_w)
        filt[t] = a - log_norm[t]
        if t + 1 < T:
            cur = _propagate(filt[t], log_f, log_w)
    return pred, filt, log_norm


def _backward(log_f, log_g, log_w):
    """``beta_t(x) = integral f(x, x') g_{t+1}(x') beta_{t+1}(x') dx'``, up to per-t constants."""
    T, n = log_g.shape
    beta = np.zeros((T, n))
    for t in range(T - 2, -1, -1):
        b = logsumexp(log_f + (log_g[t + 1] + beta[t + 1] + log_w)[None, :], axis=1)
        beta[t] = b - b.max()
    return beta


def _smoothing(filt, beta, log_w):
    sm = filt + beta
    return sm - logsumexp(sm + log_w, axis=1, keepdims=True)


def grid_log_likelihood_1d(model: HmmModel, grid: Grid1D | None = None) -> float:
    """Log marginal likelihood by forward trapezoidal quadrature."""
    grid = default_grid(model) if grid is None else grid
    log_mu, log_f, log_g, log_w = _tables(model, grid)
    _, _, log_norm = _forward(log_mu, log_f, log_g, log_w)
    return float(np.sum(log_norm))


def grid_backward_psi_star_1d(model: HmmModel, grid: Grid1D | None = None) -> tuple[np.ndarray, float]:
    """Tabulate ``log psi*_t`` on the grid nodes by backward quadrature.

    Returns a ``(T, n_nodes)`` table and ``log psi~*_0``.
    """
    grid = default_grid(model) if grid is None else grid
    log_mu, log_f, log_g, log_w = _tables(model, grid)
    T = log_g.shape[0]
    table = np.empty_like(log_g)
    table[T - 1] = log_g[T - 1]
    for t in range(T - 2, -1, -1):
        table[t] = log_g[t] + logsumexp(log_f + (table[t + 1] + log_w)[None, :], axis=1)
    return table, float(logsumexp(log_mu + table[0] + log_w))


def _psi_table(psi, grid: Grid1D, T: int) -> np.ndarray:
    if isinstance(psi, PsiSequence):
        if len(psi) != T:
            raise OracleError("psi sequence length differs from T")
        table = np.stack([psi[t].log_eval(grid.nodes[:, None]) for t in range(1, T + 1)])
    else:
        table = np.asarray(psi, dtype=float)
        if table.shape != (T, grid.n_nodes):
            raise OracleError("psi table must have shape (T, n_nodes)")
    if not np.all(np.isfinite(table)):
        raise OracleError("psi vanishes on the grid")
    return table


def grid_asymptotic_variance_1d(model: HmmModel, psi, grid: Grid1D | None = None, form: str = "marginals") -> float:
    """Asymptotic variance of ``sqrt(N)(Z^N_psi / Z - 1)`` by quadrature.

    ``psi`` is a :class:`PsiSequence` or a ``(T, n_nodes)`` table of
    ``log psi_t`` values. Two algebraically equal forms are available:

    ``"marginals"``
        ``sum_t [integral pi_T(x_t)^2 / pi_{t-1}(x_t) dx_t - 1]`` with the
        twisted-model marginals computed by forward-backward quadrature.
    ``"predictive"``
        ``sum_t [E[psi*_t/psi_t | y_{1:T}] * E[psi_t | y_{1:t-1}] / E[psi*_t | y_{1:t-1}] - 1]``
        with the smoothing and one-step predictive laws of the original model.
    """
    grid = default_grid(model) if grid is None else grid
    log_mu, log_f, log_g, log_w = _tables(model, grid)
    T = log_g.shape[0]
    lp = _psi_table(psi, grid, T)

    if form not in ("marginals", "predictive"):
        raise ValueError(f"unknown form {form!r}")
    if form == "predictive":
        pred, filt, _ = _forward(log_mu, log_f, log_g, log_w)
        sm = _smoothing(filt, _backward(log_f, log_g, log_w), log_w)
        star, _ = grid_backward_psi_star_1d(model, grid)
        return float(sum(_ratio_term(sm[t], pred[t], lp[t], star[t], log_w) for t in range(T)))

    # twisted model on the grid, psi~ by quadrature
    lpt = np.zeros((T, grid.n_nodes))
    for t in range(T - 1):
        lpt[t] = logsumexp(log_f + (lp[t + 1] + log_w)[None, :], axis=1)
    lpt0 = logsumexp(log_mu + lp[0] + log_w)
    log_mu_tw = log_mu + lp[0] - lpt0
    log_g_tw = log_g + lpt - lp
    log_g_tw[0] += lpt0
    T_pred = np.empty((T, grid.n_nodes))
    T_filt = np.empty((T, grid.n_nodes))
    cur = log_mu_tw
    for t in range(T):
        T_pred[t] = cur - logsumexp(cur + log_w)
        a = T_pred[t] + log_g_tw[t]
        T_filt[t] = a - logsumexp(a + log_w)
        if t + 1 < T:
            log_f_tw = log_f + lp[t + 1][None, :] - lpt[t][:, None]
            cur = _propagate(T_filt[t], log_f_tw, log_w)
    beta = np.zeros((T, grid.n_nodes))
    for t in range(T - 2, -1, -1):
        log_f_tw = log_f + lp[t + 1][None, :] - lpt[t][:, None]
        b = logsumexp(log_f_tw + (log_g_tw[t + 1] + beta[t + 1] + log_w)[None, :], axis=1)
        beta[t] = b - b.max()
    sm = _smoothing(T_filt, beta, log_w)

    if form == "marginals":
        terms = np.exp(logsumexp(2 * sm - T_pred + log_w, axis=1)) - 1.0
    return float(np.sum(terms))


def _ratio_term(log_post, log_pred, log_psi, log_star, log_w) -> float:
    a = logsumexp(log_post + log_star - log_psi + log_w)
    b = logsumexp(log_pred + log_psi + log_w)
    c = logsumexp(log_pred + log_star + log_w)
    return float(np.exp(a + b - c) - 1.0)


def grid_bpf_asymptotic_variance_1d(model: HmmModel, grid: Grid1D | None = None) -> float:
    """Bootstrap-filter variance ``sum_t (E[psibar*_t(X_t) | y_{1:T}] - 1)``.

    ``psibar*_t`` is ``psi*_t`` divided by its one-step predictive mean.
    """
    grid = default_grid(model) if grid is None else grid
    log_mu, log_f, log_g, log_w = _tables(model, grid)
    pred, filt, _ = _forward(log_mu, log_f, log_g, log_w)
    sm = _smoothing(filt, _backward(log_f, log_g, log_w), log_w)
    star, _ = grid_backward_psi_star_1d(model, grid)
    total = 0.0
    for t in range(model.T):
        norm = logsumexp(pred[t] + star[t] + log_w)
        total += np.exp(logsumexp(sm[t] + star[t] - norm + log_w)) - 1.0
    return float(total)


def grid_smoothing_means_1d(model: HmmModel, grid: Grid1D | None = None) -> np.ndarray:
    """Posterior means ``E[X_t | y_{1:T}]`` by quadrature."""
    grid = default_grid(model) if grid is None else grid
    log_mu, log_f, log_g, log_w = _tables(model, grid)
    _, filt, _ = _forward(log_mu, log_f, log_g, log_w)
    sm = _smoothing(filt, _backward(log_f, log_g, log_w), log_w)
    return np.exp(sm + log_w) @ grid.nodes
