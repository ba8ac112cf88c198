"""Gaussian kernel algebra and log-space weight arithmetic.

Everything here works on natural-log values: densities, mixture weights and
particle weights are combined with max-shifted exponentiation so that
high-dimensional models do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(a, axis=None, keepdims: bool = False):
    """Max-shifted ``log(sum(exp(a)))``; rows of ``-inf`` give ``-inf``.

    Plain numpy: the particle loops call this with small arrays where the
    dispatch overhead of ``scipy.special.logsumexp`` dominates.
    """
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if out.ndim else float(out)


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


class NotPositiveDefiniteError(ValueError):
    """Raised when a covariance fails its Cholesky factorization."""


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (stack of) covariance matrices."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariance is not positive definite") from exc


@dataclass(frozen=True)
class GaussianComponent:
    """A weighted Gaussian ``exp(log_weight) * N(.; mean, cov)``.

    With ``diagonal=True`` the covariance is stored as the vector of its
    diagonal entries and evaluated in O(d).
    """

    mean: np.ndarray
    cov: np.ndarray
    log_weight: float = 0.0
    diagonal: bool = False
    _chol: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1 or mean.size < 1:
            raise DimensionError("mean must be a non-empty vector")
        d = mean.size
        cov = np.asarray(self.cov, dtype=float)
        if self.diagonal:
            cov = np.atleast_1d(cov)
            if cov.shape != (d,):
                raise DimensionError(f"diagonal covariance must have shape ({d},), got {cov.shape}")
            if not np.all(cov > 0):
                raise NotPositiveDefiniteError("diagonal covariance entries must be positive")
            chol = None
        else:
            cov = np.atleast_2d(cov)
            if cov.shape != (d, d):
                raise DimensionError(f"covariance must have shape ({d}, {d}), got {cov.shape}")
            if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
                raise NotPositiveDefiniteError("covariance is not symmetric")
            chol = cholesky(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "log_weight", float(self.log_weight))
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.diagonal else self.cov

    def chol(self) -> np.ndarray:
        if self.diagonal:
            return np.diag(np.sqrt(self.cov))
        return self._chol

    def log_det(self) -> float:
        if self.diagonal:
            return float(np.sum(np.log(self.cov)))
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Batched ``log N(x; mean, L L^T)``.

    Leading axes of ``x``, ``mean`` and ``chol`` broadcast against each other;
    the trailing axis (two for ``chol``) is the state dimension.
    """
    diff = np.asarray(x, dtype=float) - mean
    d = diff.shape[-1]
    if d == 1:
        z = diff / chol[..., 0]
    elif chol.ndim == 2:
        z = solve_triangular(chol, diff.reshape(-1, d).T, lower=True).T.reshape(diff.shape)
    else:
        chol_b, diff_b = np.broadcast_arrays(chol, diff[..., None])
        z = np.linalg.solve(chol_b, diff_b)[..., 0]
    log_det = np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * np.sum(z * z, axis=-1) - log_det - 0.5 * d * LOG_2PI


def log_gaussian_density(x, comp: GaussianComponent):
    """``log N(x; comp.mean, comp.cov)``, ignoring ``comp.log_weight``.

    ``x`` may be a single point of shape ``(d,)`` or a batch ``(n, d)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x) if comp.dim > 1 or x.ndim == 2 else x.reshape(-1, 1)
    if x.shape[-1] != comp.dim:
        raise DimensionError(f"point has dimension {x.shape[-1]}, component has {comp.dim}")
    diff = x - comp.mean
    if comp.diagonal:
        out = -0.5 * (np.sum(diff * diff / comp.cov, axis=-1) + comp.log_det() + comp.dim * LOG_2PI)
    else:
        out = mvn_logpdf(x, comp.mean, comp._chol)
    return float(out[0]) if single else out


def gaussian_product(c1: GaussianComponent, c2: GaussianComponent) -> tuple[float, GaussianComponent]:
    """Write ``N(x; a1, b1) N(x; a2, b2)`` as ``exp(log_scale) N(x; a, b)``.

    The returned component carries ``log_weight = 0``; the weights of the
    inputs are not propagated.
    """
    if c1.dim != c2.dim:
        raise DimensionError("components have different dimensions")
    if c1.diagonal and c2.diagonal:
        s = c1.cov + c2.cov
        cov = c1.cov * c2.cov / s
        mean = c1.mean + c1.cov / s * (c2.mean - c1.mean)
        log_scale = -0.5 * (np.sum((c1.mean - c2.mean) ** 2 / s) + np.sum(np.log(s)) + c1.dim * LOG_2PI)
        return float(log_scale), GaussianComponent(mean, cov, diagonal=True)
    b1, b2 = c1.dense_cov(), c2.dense_cov()
    s = b1 + b2
    chol_s = cholesky(s)
    gain = np.linalg.solve(s, b1).T  # b1 s^{-1}
    mean = c1.mean + gain @ (c2.mean - c1.mean)
    cov = b1 - gain @ b1
    cov = 0.5 * (cov + cov.T)
    log_scale = float(mvn_logpdf(c1.mean, c2.mean, chol_s))
    return log_scale, GaussianComponent(mean, cov)


def log_component_psi_integral(comp: GaussianComponent, psi) -> float:
    """``log of integral N(u; comp) psi(u) du`` for a constant-plus-mixture ``psi``."""
    if comp.dim != psi.dim:
        raise DimensionError("component and twisting function have different dimensions")
    terms = []
    if psi.constant > 0:
        terms.append(np.log(psi.constant))
    cov = comp.dense_cov()
    for c in psi.components:
        chol_s = cholesky(cov + c.dense_cov())
        terms.append(c.log_weight + float(mvn_logpdf(comp.mean, c.mean, chol_s)))
    return psi.log_scale + float(logsumexp(terms))


def component_psi_integral(comp: GaussianComponent, psi) -> float:
    """``integral N(u; comp) psi(u) du``; always positive."""
    return float(np.exp(log_component_psi_integral(comp, psi)))


def _check_log_weights(log_w) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    if log_w.ndim != 1 or log_w.size == 0:
        raise ValueError("log-weights must be a non-empty vector")
    if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    if not np.any(np.isfinite(log_w)):
        raise ValueError("all weights are zero")
    return log_w


def normalize_log_weights(log_w) -> np.ndarray:
    """Normalized linear-domain weights from log-weights."""
    log_w = _check_log_weights(log_w)
    w = np.exp(log_w - log_w.max())
    return w / w.sum()


def ess(log_w) -> float:
    """Effective sample size ``(sum W)^2 / sum W^2`` from log-weights, in [1, N]."""
    log_w = _check_log_weights(log_w)
    w = np.exp(log_w - log_w.max())
    value = w.sum() ** 2 / np.dot(w, w)
    return float(min(max(value, 1.0), log_w.size))


class AliasTable:
    """Walker's alias table for O(1) categorical draws after O(N) setup."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        n = probs.size
        scaled = probs * (n / probs.sum())
        self.prob = np.ones(n)
        self.alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, g = small.pop(), large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        n = self.prob.size
        idx = rng.integers(0, n, size=count)
        keep = rng.random(count) < self.prob[idx]
        return np.where(keep, idx, self.alias[idx])


def categorical_sample(rng: np.random.Generator, log_w, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. indices with probabilities proportional to ``exp(log_w)``.

    Uses an alias table when ``count`` exceeds the number of categories and
    inverse-CDF search otherwise.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    w = normalize_log_weights(log_w)
    if count > w.size:
        return AliasTable(w).draw(rng, count)
    cdf = np.cumsum(w)
    idx = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    return np.minimum(idx, w.size - 1)
