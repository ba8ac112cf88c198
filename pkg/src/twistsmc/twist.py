"""Twisting functions and twisted models.

A twisting function has the form ``psi(x) = exp(s) * (C + sum_j c_j N(x; a_j, b_j))``.
For Gaussian-mixture transitions, the twisted initial law and transitions are
again explicit Gaussian mixtures, and ``f(x, psi)`` is available in closed
form, which is what makes the twisted filter implementable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .gaussian import (
    LOG_2PI,
    DimensionError,
    GaussianComponent,
    cholesky,
    log_component_psi_integral,
    logsumexp,
)
from .hmm import HmmModel


class UnrepresentableError(ValueError):
    """Raised when a requested function is not in the constant-plus-mixture class."""


class PsiFunction:
    """``psi(x) = exp(log_scale) * (constant + sum_j exp(w_j) N(x; a_j, b_j))``.

    Immutable. Components are :class:`GaussianComponent` instances whose
    ``log_weight`` holds ``log c_j``.
    """

    def __init__(self, dim: int, constant: float = 0.0, components=(), log_scale: float = 0.0):
        constant = float(constant)
        if not np.isfinite(constant) or constant < 0:
            raise ValueError("constant term must be a finite non-negative number")
        components = tuple(components)
        if constant == 0 and not components:
            raise ValueError("psi needs a positive constant or at least one component")
        for c in components:
            if c.dim != dim:
                raise DimensionError("component dimension differs from psi dimension")
            if not np.isfinite(c.log_weight):
                raise ValueError("mixture coefficients must be positive and finite")
        if not np.isfinite(log_scale):
            raise ValueError("log_scale must be finite")
        self.dim = int(dim)
        self.constant = constant
        self.components = components
        self.log_scale = float(log_scale)
        J = len(components)
        self.log_constant = np.log(constant) if constant > 0 else -np.inf
        self.log_weights = np.array([c.log_weight for c in components])
        self.means = np.array([c.mean for c in components]).reshape(J, dim)
        self.covs = np.array([c.dense_cov() for c in components]).reshape(J, dim, dim)
        self._chols = cholesky(self.covs) if J else self.covs
        self._log_dets = 2.0 * np.sum(np.log(np.diagonal(self._chols, axis1=-2, axis2=-1)), axis=-1)

    @classmethod
    def constant_fn(cls, dim: int, value: float = 1.0) -> "PsiFunction":
        return cls(dim, constant=value)

    @property
    def is_constant(self) -> bool:
        return not self.components

    def rescaled(self, log_factor: float) -> "PsiFunction":
        return PsiFunction(self.dim, self.constant, self.components, self.log_scale + log_factor)

    def log_eval(self, X, *, unscaled: bool = False) -> np.ndarray:
        """Batched ``log psi`` for ``X`` of shape ``(n, d)``."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        terms = np.full((X.shape[0], 1 + len(self.components)), self.log_constant)
        if self.components:
            maha = np.empty((X.shape[0], len(self.components)))
            for j, c in enumerate(self.components):
                diff = X - self.means[j]
                if c.diagonal or self.dim == 1:
                    maha[:, j] = np.sum(diff * diff / np.diagonal(self.covs[j]), axis=1)
                else:
                    z = solve_triangular(self._chols[j], diff.T, lower=True)
                    maha[:, j] = np.sum(z * z, axis=0)
            terms[:, 1:] = self.log_weights - 0.5 * (maha + self._log_dets + self.dim * LOG_2PI)
        out = logsumexp(terms, axis=1)
        return out if unscaled else out + self.log_scale

    def to_dict(self) -> dict:
        comps = []
        for c in self.components:
            entry = {"mean": c.mean.tolist(), "log_weight": c.log_weight}
            entry["diag" if c.diagonal else "cov"] = c.cov.tolist()
            comps.append(entry)
        return {"constant": self.constant, "log_scale": self.log_scale, "components": comps}

    @classmethod
    def from_dict(cls, dim: int, data: dict) -> "PsiFunction":
        comps = []
        for e in data.get("components", []):
            if "diag" in e:
                comps.append(GaussianComponent(e["mean"], e["diag"], e["log_weight"], diagonal=True))
            else:
                comps.append(GaussianComponent(e["mean"], e["cov"], e["log_weight"]))
        return cls(dim, data.get("constant", 0.0), comps, data.get("log_scale", 0.0))

    def __repr__(self):
        return f"PsiFunction(dim={self.dim}, constant={self.constant:.4g}, n_components={len(self.components)})"


def psi_eval_log(psi: PsiFunction, x) -> float | np.ndarray:
    """``log psi(x)`` for one point or a batch of points."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (psi.dim,) and not (psi.dim == 1 and x.ndim == 0):
        raise DimensionError(f"point dimension does not match psi dimension {psi.dim}")
    out = psi.log_eval(x)
    return float(out[0]) if x.ndim <= 1 else out


class PsiSequence:
    """Twisting functions ``psi_1, ..., psi_T``; ``psi_{T+1} = 1`` is implicit."""

    def __init__(self, psis):
        psis = list(psis)
        if not psis:
            raise ValueError("a psi sequence needs at least one function")
        dims = {p.dim for p in psis}
        if len(dims) != 1:
            raise DimensionError("psi functions have inconsistent dimensions")
        self.psis = psis
        self.dim = dims.pop()

    @classmethod
    def constant(cls, dim: int, T: int, value: float = 1.0) -> "PsiSequence":
        return cls([PsiFunction.constant_fn(dim, value)] * T)

    def __len__(self):
        return len(self.psis)

    def __getitem__(self, t: int) -> PsiFunction:
        """1-based access; ``seq[T + 1]`` is ``None`` (the unit function)."""
        if t == len(self.psis) + 1:
            return None
        if not 1 <= t <= len(self.psis):
            raise IndexError(t)
        return self.psis[t - 1]

    def rescaled(self, log_factors) -> "PsiSequence":
        return PsiSequence([p.rescaled(float(c)) for p, c in zip(self.psis, log_factors)])

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "psis": [p.to_dict() for p in self.psis]})

    @classmethod
    def from_json(cls, text: str) -> "PsiSequence":
        data = json.loads(text)
        return cls([PsiFunction.from_dict(data["dim"], p) for p in data["psis"]])


class _TwistPlan:
    """Per-(covariances, psi) precomputation for twisting a Gaussian mixture.

    ``covs`` has shape ``(nb, M, d, d)``; ``nb`` is 1 for state-independent
    covariances.
    """

    def __init__(self, covs: np.ndarray, psi: PsiFunction):
        self.psi = psi
        self.d = covs.shape[-1]
        self.chol_b = cholesky(covs)
        if psi.components:
            S = covs[:, :, None] + psi.covs[None, None]
            self.S_inv = np.linalg.inv(S)
            self.log_det_S = np.linalg.slogdet(S)[1]
            b = np.broadcast_to(covs[:, :, None], S.shape)
            self.gain = b @ self.S_inv
            P = b - self.gain @ b
            self.chol_P = cholesky(0.5 * (P + np.swapaxes(P, -1, -2)))

    def apply(self, lw: np.ndarray, means: np.ndarray):
        """Unnormalized log-weights, means and Cholesky factors of the twisted mixture."""
        psi = self.psi
        n, M, d = means.shape
        nb = self.chol_b.shape[0]
        out_w, out_m, out_c = [], [], []
        if psi.constant > 0:
            out_w.append(lw + psi.log_constant)
            out_m.append(means)
            out_c.append(self.chol_b)
        if psi.components:
            J = len(psi.components)
            diff = psi.means[None, None] - means[:, :, None]
            sd = (self.S_inv @ diff[..., None])[..., 0]
            q = np.sum(diff * sd, axis=-1)
            log_n = -0.5 * (q + self.log_det_S + d * LOG_2PI)
            out_w.append((lw[:, :, None] + psi.log_weights + log_n).reshape(n, M * J))
            shift = (self.gain @ diff[..., None])[..., 0]
            out_m.append((means[:, :, None] + shift).reshape(n, M * J, d))
            out_c.append(self.chol_P.reshape(nb, M * J, d, d))
        return np.concatenate(out_w, axis=1), np.concatenate(out_m, axis=1), np.concatenate(out_c, axis=1)


def twisted_kernel_mixture(lw, means, covs, psi: PsiFunction):
    """Twist the mixture ``sum_k exp(lw_k) N(.; means_k, covs_k)`` by unscaled ``psi``.

    Returns ``(log_weights, means, chols)`` of the product, unnormalized: the
    log-sum of the weights equals ``log integral mixture * psi`` without
    ``psi.log_scale``.
    """
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 3:
        covs = covs[None]
    return _TwistPlan(covs, psi).apply(lw, means)


def log_transition_apply_psi(kernel, X, psi: PsiFunction | None) -> np.ndarray:
    """Batched ``log f(x, psi)``; ``psi=None`` is the unit function."""
    X = np.asarray(X, dtype=float).reshape(-1, kernel.dim)
    if psi is None:
        return np.zeros(X.shape[0])
    if psi.dim != kernel.dim:
        raise DimensionError("psi dimension differs from state dimension")
    lw, means, covs = kernel.components(X)
    w, _, _ = twisted_kernel_mixture(lw, means, covs, psi)
    return logsumexp(w, axis=1) + psi.log_scale


def transition_apply_psi(model: HmmModel, x, psi: PsiFunction) -> float:
    """``f(x, psi) = integral f(x, x') psi(x') dx'`` at a single state."""
    x = np.asarray(x, dtype=float)
    if x.size != model.dim_state:
        raise DimensionError("state dimension mismatch")
    return float(np.exp(log_transition_apply_psi(model.transition, x[None], psi)[0]))


def _sample_mixture_rows(rng, log_w, means, chols):
    """One draw per row from per-row Gaussian mixtures."""
    n, K, d = means.shape
    rows = np.arange(n)
    if K == 1:
        k = np.zeros(n, dtype=int)
    else:
        w = np.exp(log_w - log_w.max(axis=1, keepdims=True))
        cdf = np.cumsum(w, axis=1)
        u = rng.random(n) * cdf[:, -1]
        k = np.minimum(np.sum(cdf <= u[:, None], axis=1), K - 1)
    chol = chols[0, k] if chols.shape[0] == 1 else chols[rows, k]
    z = rng.standard_normal((n, d))
    return means[rows, k] + np.einsum("nij,nj->ni", chol, z)


def _mixture_logpdf(x, log_w, means, chols):
    """``log sum_k w_k N(x; m_k, L_k L_k^T)`` with normalized weights, one row per point."""
    n, K, d = means.shape
    diff = x[:, None, :] - means
    chol_b, diff_b = np.broadcast_arrays(chols, diff[..., None])
    z = np.linalg.solve(chol_b, diff_b)[..., 0]
    log_det = np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
    comp = -0.5 * np.sum(z * z, axis=-1) - log_det - 0.5 * d * LOG_2PI
    lw = log_w - logsumexp(log_w, axis=1, keepdims=True)
    return logsumexp(lw + comp, axis=1)


class TwistedModel:
    """The twisted HMM built from a base model and a psi sequence.

    The twisted initial law is ``mu psi_1 / psi~_0``; the twisted transition at
    time ``t`` is ``f(x, .) psi_t / psi~_{t-1}(x)``; the twisted potentials are
    ``g^psi_1 = g_1 psi~_1 / psi_1 * psi~_0`` and ``g^psi_t = g_t psi~_t / psi_t``
    with ``psi~_t(x) = f(x, psi_{t+1})`` and ``psi~_T = 1``.
    """

    def __init__(self, base: HmmModel, psi: PsiSequence):
        if psi.dim != base.dim_state:
            raise DimensionError("psi dimension differs from state dimension")
        if len(psi) != base.T:
            raise DimensionError(f"psi sequence has length {len(psi)}, model has T={base.T}")
        self.base = base
        self.psi = psi
        self.T = base.T
        init = base.initial
        lw, means, chols = twisted_kernel_mixture(
            init.log_weights[None], init.means[None], init.covs, psi[1]
        )
        self._init_mix = (lw, means, chols)
        self.log_psi_tilde_0_unscaled = float(logsumexp(lw))
        self.log_psi_tilde_0 = self.log_psi_tilde_0_unscaled + psi[1].log_scale
        kernel = base.transition
        probe = np.zeros((1, base.dim_state))
        _, _, covs = kernel.components(probe)
        self._static_covs = np.asarray(covs).ndim == 3
        self._plans = {}
        if self._static_covs:
            covs4 = np.asarray(covs, dtype=float)[None]
            for t in range(2, self.T + 1):
                p = psi[t]
                key = id(p)
                if key not in self._plans:
                    self._plans[key] = _TwistPlan(covs4, p)

    def _plan(self, t: int, covs):
        p = self.psi[t]
        if self._static_covs:
            return self._plans[id(p)]
        return _TwistPlan(np.asarray(covs, dtype=float), p)

    def transition_mixture(self, t: int, X):
        """Unnormalized mixture for ``f^psi_t(x, .)``, ``t`` in ``2..T``.

        The row-wise log-sum of the weights is ``log psi~_{t-1}(x)`` without the
        log-scale of ``psi_t``.
        """
        if not 2 <= t <= self.T:
            raise IndexError(t)
        lw, means, covs = self.base.transition.components(X)
        return self._plan(t, covs).apply(lw, means)

    def initial_mixture(self):
        lw, means, chols = self._init_mix
        return lw[0], means[0], chols[0]

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lw, means, chols = self._init_mix
        k = np.broadcast_to(lw, (n, lw.shape[1]))
        return _sample_mixture_rows(rng, k, np.broadcast_to(means, (n,) + means.shape[1:]), chols)

    def sample_transition(self, rng: np.random.Generator, t: int, X) -> np.ndarray:
        lw, means, chols = self.transition_mixture(t, X)
        return _sample_mixture_rows(rng, lw, means, chols)

    def log_psi(self, t: int, X) -> np.ndarray:
        return self.psi[t].log_eval(X)

    def log_psi_tilde(self, t: int, X) -> np.ndarray:
        """``log psi~_t``; ``t = 0`` gives the constant ``log psi~_0``."""
        X = np.asarray(X, dtype=float).reshape(-1, self.base.dim_state)
        if t == 0:
            return np.full(X.shape[0], self.log_psi_tilde_0)
        if t == self.T:
            return np.zeros(X.shape[0])
        w, _, _ = self.transition_mixture(t + 1, X)
        return logsumexp(w, axis=1) + self.psi[t + 1].log_scale

    def log_g_offset(self, t: int) -> float:
        """Constant separating :meth:`log_g` from its scale-free part."""
        s_next = self.psi[t + 1].log_scale if t < self.T else 0.0
        s_t = 0.0 if t == 1 else self.psi[t].log_scale
        return s_next - s_t

    def log_g_unscaled(self, t: int, X, log_psi_tilde_unscaled=None) -> np.ndarray:
        """``log g^psi_t`` computed with every ``psi`` at unit log-scale."""
        X = np.asarray(X, dtype=float).reshape(-1, self.base.dim_state)
        if log_psi_tilde_unscaled is None:
            if t == self.T:
                log_psi_tilde_unscaled = np.zeros(X.shape[0])
            else:
                w, _, _ = self.transition_mixture(t + 1, X)
                log_psi_tilde_unscaled = logsumexp(w, axis=1)
        out = self.base.log_g(t, X) + log_psi_tilde_unscaled - self.psi[t].log_eval(X, unscaled=True)
        if t == 1:
            out = out + self.log_psi_tilde_0_unscaled
        return out

    def log_g(self, t: int, X) -> np.ndarray:
        """``log g^psi_t(x)`` exactly as defined, including all scales."""
        return self.log_g_unscaled(t, X) + self.log_g_offset(t)

    def log_mu(self, X) -> np.ndarray:
        """Log-density of the twisted initial law, from its explicit mixture."""
        X = np.asarray(X, dtype=float).reshape(-1, self.base.dim_state)
        lw, means, chols = self._init_mix
        n = X.shape[0]
        return _mixture_logpdf(
            X,
            np.broadcast_to(lw, (n, lw.shape[1])),
            np.broadcast_to(means, (n,) + means.shape[1:]),
            chols,
        )

    def log_f(self, t: int, X, X_new) -> np.ndarray:
        """Log-density of ``f^psi_t(x, x_new)``, from its explicit mixture."""
        lw, means, chols = self.transition_mixture(t, X)
        return _mixture_logpdf(np.asarray(X_new, dtype=float).reshape(means.shape[0], -1), lw, means, chols)


def build_twisted_model(model: HmmModel, psi: PsiSequence) -> TwistedModel:
    return TwistedModel(model, psi)


def integrand_log_ratio(model: HmmModel, psi: PsiSequence, path) -> float:
    """Log of (twisted path integrand) / (original path integrand); zero in exact arithmetic."""
    tw = build_twisted_model(model, psi)
    path = np.asarray(path, dtype=float).reshape(model.T, model.dim_state)
    twisted = tw.log_mu(path[:1])[0] + tw.log_g(1, path[:1])[0]
    base = model.initial.logpdf(path[:1])[0] + model.log_g(1, path[:1])[0]
    for t in range(2, model.T + 1):
        prev, cur = path[t - 2 : t - 1], path[t - 1 : t]
        twisted += tw.log_f(t, prev, cur)[0] + tw.log_g(t, cur)[0]
        base += model.transition.logpdf(prev, cur)[0] + model.log_g(t, cur)[0]
    return float(twisted - base)


def _gaussian_in_state(C, D, y):
    """Information form of ``x -> N(y; Cx, D)``: ``(J, h, c)`` with log = -x'Jx/2 + h'x + c."""
    D_inv = np.linalg.inv(D)
    J = C.T @ D_inv @ C
    h = C.T @ D_inv @ y
    c = -0.5 * (y @ D_inv @ y + np.linalg.slogdet(D)[1] + y.size * LOG_2PI)
    return J, h, c


def _info_to_component(J, h, c):
    """Turn ``exp(-x'Jx/2 + h'x + c)`` into ``(log_scale, mean, cov)``."""
    try:
        chol = np.linalg.cholesky(J)
    except np.linalg.LinAlgError as exc:
        raise UnrepresentableError("function is not a proper Gaussian in the state") from exc
    cov = np.linalg.inv(J)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ h
    d = h.size
    log_scale = c + 0.5 * h @ mean + 0.5 * d * LOG_2PI - np.sum(np.log(np.diag(chol)))
    return float(log_scale), mean, cov


def _require_lg(model: HmmModel):
    if not model.is_linear_gaussian:
        raise UnrepresentableError(f"observation density of a {model.kind} model is not Gaussian in the state")
    return model.params


def fully_adapted_psi(model: HmmModel) -> PsiSequence:
    """``psi_t`` proportional to ``x -> g(x, y_t)`` (the fully adapted APF)."""
    p = _require_lg(model)
    psis = []
    for y in model.observations:
        log_scale, mean, cov = _info_to_component(*_gaussian_in_state(p["C"], p["D"], y))
        psis.append(PsiFunction(model.dim_state, 0.0, [GaussianComponent(mean, cov)], log_scale))
    return PsiSequence(psis)


def exact_psi_star_lgssm(model: HmmModel, log_scale_tracking: bool = True) -> tuple[PsiSequence, float]:
    """Optimal twisting sequence of a linear-Gaussian model by backward recursion.

    ``psi*_T = g(., y_T)`` and ``psi*_t = g(., y_t) f(., psi*_{t+1})``, each a
    single Gaussian with a log-scale. Returns the sequence and
    ``log psi~*_0 = log integral mu psi*_1``, which is the log marginal likelihood.
    With ``log_scale_tracking=False`` the returned functions carry zero
    log-scale (the filter does not depend on it).
    """
    p = _require_lg(model)
    A, B, C, D = p["A"], p["B"], p["C"], p["D"]
    d = model.dim_state
    psis = [None] * model.T
    nxt = None
    for t in range(model.T, 0, -1):
        J, h, c = _gaussian_in_state(C, D, model.observations[t - 1])
        if nxt is not None:
            s_next, a_next, b_next = nxt
            S = B + b_next
            S_inv = np.linalg.inv(S)
            J = J + A.T @ S_inv @ A
            h = h + A.T @ S_inv @ a_next
            c = c + s_next - 0.5 * (a_next @ S_inv @ a_next + np.linalg.slogdet(S)[1] + d * LOG_2PI)
        nxt = _info_to_component(J, h, c)
        s, mean, cov = nxt
        psis[t - 1] = PsiFunction(d, 0.0, [GaussianComponent(mean, cov)], s)
    s1, a1, b1 = nxt
    comp0 = GaussianComponent(p["m"], p["Sigma"])
    log_psi0 = log_component_psi_integral(comp0, psis[0])
    seq = PsiSequence(psis)
    if not log_scale_tracking:
        seq = PsiSequence([q.rescaled(-q.log_scale) for q in psis])
    return seq, float(log_psi0)
