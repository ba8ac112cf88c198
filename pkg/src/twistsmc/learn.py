"""Backward approximation of the optimal twisting functions.

At each time, targets ``g(xi_i, y_t) f(xi_i, psi_{t+1})`` are computed at the
particle locations, a scaled Gaussian density is fitted to them by least
squares, and the result plus a small positive constant becomes ``psi_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .filters import FilterOutput
from .gaussian import LOG_2PI, DimensionError, GaussianComponent, logsumexp
from .hmm import HmmModel
from .twist import PsiFunction, PsiSequence, log_transition_apply_psi, twisted_kernel_mixture


class FitError(ValueError):
    """Raised when a fit problem is ill-posed; ``t`` is set when known."""

    def __init__(self, message: str, t: int | None = None):
        super().__init__(message if t is None else f"{message} (time {t})")
        self.t = t


REGULARIZERS = ("peak_over_N", "mass_over_N")


@dataclass(frozen=True)
class FitConfig:
    diagonal_only: bool = True
    max_gauss_newton_iters: int = 50
    param_tolerance: float = 1e-8
    # a rule name from REGULARIZERS or a positive float used as the constant directly
    regularizer: str | float = "mass_over_N"

    def __post_init__(self):
        if self.max_gauss_newton_iters < 1:
            raise ValueError("max_gauss_newton_iters must be at least 1")
        if self.param_tolerance <= 0:
            raise ValueError("param_tolerance must be positive")
        if self.regularizer not in REGULARIZERS:
            if isinstance(self.regularizer, bool) or not isinstance(self.regularizer, (int, float)) or not self.regularizer > 0:
                raise ValueError(f"regularizer must be one of {REGULARIZERS} or a positive number")


@dataclass
class FitProblem:
    """Support points, log targets and, optionally, the law the points came from.

    ``log_predictive_mass(psi)`` returns ``log`` of the average integral of
    ``psi`` against the transition from the previous particles (or against
    the initial law); the ``mass_over_N`` regularizer uses it.
    """

    support_points: np.ndarray
    log_targets: np.ndarray
    log_predictive_mass: Callable[[PsiFunction], float] | None = None

    def __post_init__(self):
        X = np.asarray(self.support_points, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        lt = np.asarray(self.log_targets, dtype=float).reshape(-1)
        if lt.shape[0] != X.shape[0]:
            raise DimensionError("one target per support point is required")
        if np.any(np.isnan(lt)) or np.any(lt == np.inf) or not np.any(np.isfinite(lt)):
            raise FitError("targets must be finite and not all zero")
        self.support_points, self.log_targets = X, lt

    @property
    def dim(self) -> int:
        return self.support_points.shape[1]


@dataclass
class GaussianFit:
    """Result of the least-squares fit of ``lambda * psi_i ~ N(xi_i; mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray
    log_lambda: float
    objective: float
    initial_objective: float
    history: list = field(default_factory=list)
    degenerate: bool = False


def backward_targets(model: HmmModel, t: int, particles, psi_next: PsiFunction | None) -> np.ndarray:
    """Log targets ``log g(xi, y_t) + log f(xi, psi_{t+1})``; ``psi_next=None`` means 1."""
    X = np.asarray(particles, dtype=float).reshape(-1, model.dim_state)
    if psi_next is not None and psi_next.dim != model.dim_state:
        raise DimensionError("psi_next dimension differs from state dimension")
    return model.log_g(t, X) + log_transition_apply_psi(model.transition, X, psi_next)


class _Param:
    """Mean plus upper-triangular precision factor ``R`` (``Sigma^{-1} = R^T R``).

    The diagonal of ``R`` is stored on the log scale.
    """

    def __init__(self, d: int, diagonal: bool):
        self.d = d
        self.diagonal = diagonal
        self.iu = np.triu_indices(d, 1)
        self.size = 2 * d + (0 if diagonal else len(self.iu[0]))

    def pack(self, mean, cov) -> np.ndarray:
        if self.diagonal:
            return np.concatenate([mean, -0.5 * np.log(np.diag(cov))])
        R = np.linalg.cholesky(np.linalg.inv(cov)).T
        return np.concatenate([mean, np.log(np.diag(R)), R[self.iu]])

    def unpack(self, theta):
        d = self.d
        mean = theta[:d]
        R = np.diag(np.exp(theta[d : 2 * d]))
        if not self.diagonal:
            R[self.iu] = theta[2 * d :]
        return mean, R

    def cov(self, theta) -> np.ndarray:
        _, R = self.unpack(theta)
        R_inv = np.linalg.inv(R)
        return R_inv @ R_inv.T

    def log_density(self, X, theta, jacobian: bool = False):
        d = self.d
        if self.diagonal:
            prec_sd = np.exp(theta[d:])
            z = (X - theta[:d]) * prec_sd
            zz = z * z
            log_n = -0.5 * zz.sum(axis=1) + (theta[d:].sum() - 0.5 * d * LOG_2PI)
            if not jacobian:
                return log_n
            return log_n, np.hstack([z * prec_sd, 1.0 - zz])
        mean, R = self.unpack(theta)
        diff = X - mean
        z = diff @ R.T
        log_n = -0.5 * np.sum(z * z, axis=1) + np.sum(theta[d : 2 * d]) - 0.5 * d * LOG_2PI
        if not jacobian:
            return log_n
        jac = np.empty((X.shape[0], self.size))
        jac[:, :d] = z @ R
        jac[:, d : 2 * d] = 1.0 - z * diff * np.exp(theta[d : 2 * d])
        if not self.diagonal:
            i, j = self.iu
            jac[:, 2 * d :] = -z[:, i] * diff[:, j]
        return log_n, jac


def _moment_init(X, w):
    w = w / w.sum()
    mean = w @ X
    diff = X - mean
    var = w @ (diff * diff)
    spread = X.var(axis=0)
    floor = 1e-6 * np.where(spread > 0, spread, 1.0)
    return mean, np.maximum(var, floor)


def _log_quadratic_init(X, lt):
    """Diagonal Gaussian from a least-squares fit of ``log psi`` on ``[1, x, x^2]``.

    Exact when the targets are a scaled diagonal Gaussian, and uses every
    support point, unlike the weighted moments. ``None`` when some coordinate
    is not concave.
    """
    keep = np.isfinite(lt)
    Xk = X[keep]
    n, d = Xk.shape
    if n < 2 * d + 2:
        return None
    shift = Xk.mean(axis=0)
    Z = Xk - shift
    scale = np.where(Z.std(axis=0) > 0, Z.std(axis=0), 1.0)
    Z = Z / scale
    F = np.hstack([np.ones((n, 1)), Z, Z * Z])
    coef, *_ = np.linalg.lstsq(F, lt[keep] - lt[keep].max(), rcond=None)
    b, q = coef[1 : 1 + d], coef[1 + d :]
    if not np.all(q < 0):
        return None
    var = -0.5 / q
    return shift + scale * b * var, var * scale**2


def fit_gaussian(problem: FitProblem, config: FitConfig = FitConfig()) -> GaussianFit:
    """Least-squares fit of a scaled Gaussian to the targets ``psi_i``.

    Minimizes ``sum_i (psi_i - mu N(xi_i; m, Sigma))^2`` with ``mu`` profiled
    out in closed form and reports ``lambda = 1 / mu``, so that
    ``N(xi_i; m, Sigma) ~ lambda psi_i``. Measuring residuals on the target
    scale rules out the trivial minimizers of ``sum (N - lambda psi)^2``
    where the Gaussian vanishes on every support point.

    ``(m, Sigma)`` are found by Levenberg-damped Gauss-Newton started from
    the better of the target-weighted moments and a log-quadratic
    regression, so the objective never exceeds the moment initializer's
    (``initial_objective``) and never increases across iterations.
    """
    X, lt = problem.support_points, problem.log_targets
    n, d = X.shape
    if n < d + 2:
        raise FitError(f"need at least {d + 2} support points, got {n}")
    t_max = lt.max()
    psi = np.exp(lt - t_max)
    psi_sq = psi @ psi
    param = _Param(d, config.diagonal_only)

    def evaluate(th, jacobian=False):
        # the objective is invariant to rescaling N, so shift by its maximum
        if jacobian:
            log_n, jl = param.log_density(X, th, True)
        else:
            log_n = param.log_density(X, th)
        ref = log_n.max()
        nv = np.exp(log_n - ref)
        nn = np.dot(nv, nv)
        mu = np.dot(nv, psi) / nn
        r = psi - mu * nv
        obj = float(np.dot(r, r))
        if not jacobian:
            return obj, mu, ref
        jn = nv[:, None] * jl
        dmu = np.dot(psi, jn) / nn - 2.0 * mu * np.dot(nv, jn) / nn
        J = -(mu * jn + np.outer(nv, dmu))
        return obj, mu, ref, r, J

    def result(theta, mu, ref, obj, init_obj, history, degenerate=False):
        mean, _ = param.unpack(theta)
        # N(xi; m, Sigma) ~ lambda psi_i with lambda = 1 / mu
        log_lam = float(ref - t_max - np.log(mu)) if mu > 0 else np.inf
        return GaussianFit(mean.copy(), param.cov(theta), log_lam, obj, init_obj, history, degenerate)

    if np.ptp(psi) <= 1e-12 or np.count_nonzero(psi > 1e-300) < d + 2:
        # flat or numerically empty targets: moment-match the raw support points
        m_raw, v_raw = _moment_init(X, np.ones(n))
        theta = param.pack(m_raw, np.diag(v_raw))
        obj, mu, ref = evaluate(theta)
        return result(theta, mu, ref, obj, obj, [obj], True)

    m0, v0 = _moment_init(X, psi)
    theta = param.pack(m0, np.diag(v0))
    init_obj = evaluate(theta)[0]
    # the targets are only observed on the support, so keep the fit near it
    width = np.maximum(np.ptp(X, axis=0), np.sqrt(v0))
    lo, hi = X.min(axis=0) - width, X.max(axis=0) + width
    min_log_prec = -np.log(width)
    diagonal = config.diagonal_only

    def admissible(th):
        m, lp = th[:d], th[d : 2 * d]
        if not (np.isfinite(th).all() and (m >= lo).all() and (m <= hi).all() and np.abs(lp).max() <= 300):
            return False
        if diagonal:
            return bool((lp >= min_log_prec).all())
        return bool((np.diag(param.cov(th)) <= width**2).all())

    quad = _log_quadratic_init(X, lt)
    if quad is not None:
        cand = param.pack(quad[0], np.diag(quad[1]))
        if admissible(cand) and evaluate(cand)[0] < init_obj:
            theta = cand

    obj, mu, ref, r, J = evaluate(theta, True)
    history = [obj]
    damping = 1e-3
    tol = config.param_tolerance
    for _ in range(config.max_gauss_newton_iters):
        g = J.T @ r
        H = J.T @ J
        hd = np.maximum(np.diagonal(H), 1e-12)
        accepted = False
        for _ in range(20):
            A = H.copy()
            A.flat[:: A.shape[0] + 1] += damping * hd
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = theta + step
            if admissible(cand) and evaluate(cand)[0] < obj:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
        theta = cand
        prev = obj
        obj, mu, ref, r, J = evaluate(theta, True)
        history.append(obj)
        damping = max(damping / 10.0, 1e-12)
        if np.abs(step).max() <= tol * (1.0 + np.abs(theta).max()) or prev - obj <= 1e-6 * prev:
            break
    return result(theta, mu, ref, obj, init_obj, history)


def _log_relative_constant(fit: GaussianFit, problem: FitProblem, n: int, config: FitConfig) -> float:
    """``log(c / peak)`` where ``peak`` is the fitted density's maximum."""
    d = fit.mean.size
    log_peak = -0.5 * (d * LOG_2PI + np.linalg.slogdet(fit.cov)[1])
    if config.regularizer == "peak_over_N":
        return -np.log(n)
    if config.regularizer == "mass_over_N":
        # the defensive branch gets weight about 1/N in the twisted proposal
        if problem.log_predictive_mass is not None:
            unit = PsiFunction(d, 0.0, [GaussianComponent(fit.mean, fit.cov, -log_peak)])
            log_mass = problem.log_predictive_mass(unit)
        else:
            diff = problem.support_points - fit.mean
            maha = np.sum(diff * np.linalg.solve(fit.cov, diff.T).T, axis=1)
            log_mass = float(logsumexp(-0.5 * maha) - np.log(maha.size))
        return float(min(log_mass, 0.0) - np.log(n))
    return float(np.log(config.regularizer) - log_peak)


def regularizer_constant(n: int, fit: GaussianFit, problem: FitProblem, config: FitConfig) -> float:
    """The constant ``c`` added to the fitted density, in the density's units."""
    d = fit.mean.size
    log_peak = -0.5 * (d * LOG_2PI + np.linalg.slogdet(fit.cov)[1])
    return float(np.exp(log_peak + _log_relative_constant(fit, problem, n, config)))


def fit_psi(problem: FitProblem, n_for_regularizer: int, config: FitConfig = FitConfig()) -> PsiFunction:
    """Fitted ``psi(x) = N(x; m*, Sigma*) + c`` with ``c > 0``.

    Stored as ``peak * (c / peak + N / peak)`` so that the constant term stays
    representable when the peak density is huge or tiny.
    """
    fit = fit_gaussian(problem, config)
    d = problem.dim
    log_peak = -0.5 * (d * LOG_2PI + np.linalg.slogdet(fit.cov)[1])
    const = float(np.exp(_log_relative_constant(fit, problem, n_for_regularizer, config)))
    if config.diagonal_only:
        comp = GaussianComponent(fit.mean, np.diag(fit.cov).copy(), -log_peak, diagonal=True)
    else:
        comp = GaussianComponent(fit.mean, 0.5 * (fit.cov + fit.cov.T), -log_peak)
    return PsiFunction(d, const, [comp], log_peak)


def _predictive_mass(model: HmmModel, out: FilterOutput, t: int):
    if t == 1:
        init = model.initial

        def mass(psi):
            lw, _, _ = twisted_kernel_mixture(init.log_weights[None], init.means[None], init.covs, psi)
            return float(logsumexp(lw[0])) + psi.log_scale

    else:
        prev = out.particles[t - 2]

        def mass(psi):
            lf = log_transition_apply_psi(model.transition, prev, psi)
            return float(logsumexp(lf) - np.log(lf.size))

    return mass


def approximate_psi_sequence(model: HmmModel, out: FilterOutput, config: FitConfig = FitConfig()) -> PsiSequence:
    """Backward sweep ``t = T, ..., 1`` of targets and fits on the filter's particles."""
    T = model.T
    if out.particles.shape[0] != T:
        raise DimensionError("filter output length differs from the model's T")
    psis = [None] * T
    psi_next = None
    n = out.particles.shape[1]
    for t in range(T, 0, -1):
        X = out.particles[t - 1]
        try:
            problem = FitProblem(X, backward_targets(model, t, X, psi_next), _predictive_mass(model, out, t))
            psi_next = fit_psi(problem, n, config)
        except FitError as exc:
            raise FitError(str(exc), t) from exc
        psis[t - 1] = psi_next
    return PsiSequence(psis)
