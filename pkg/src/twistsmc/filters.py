"""Particle filters on twisted models.

:func:`run_psi_apf` is the psi-auxiliary particle filter with
effective-sample-size triggered multinomial resampling. With ``kappa=1`` it
resamples at every step, with ``kappa=0`` it never does. The bootstrap filter
is the same code with constant twisting functions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gaussian import categorical_sample, ess, logsumexp
from .hmm import HmmModel
from .twist import PsiSequence, TwistedModel, _sample_mixture_rows


class ParticleCollapseError(RuntimeError):
    """All particle weights vanished at some time step."""

    def __init__(self, step: int):
        super().__init__(f"all particle weights are zero at step {step}")
        self.step = step


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int
    kappa: float = 0.5
    seed: int = 0
    record_ancestry: bool = True
    # False runs the non-adaptive filter that resamples every step without computing ESS.
    adaptive: bool = True

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")


@dataclass
class FilterOutput:
    """Particle system of one filter run.

    Time is 0-based in the arrays: ``particles[t]`` holds the particles at
    time ``t + 1``. ``ancestors[t]`` gives, for each particle at time
    ``t + 2``, the index of its parent at time ``t + 1`` (the identity when no
    resampling occurred). ``resampling_times`` uses 1-based times.
    """

    particles: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray | None
    resampling_times: tuple[int, ...]
    log_z: float
    per_step_log_means: np.ndarray
    n_particles: int
    kappa: float
    seed: int
    wall_time_ms: float = 0.0
    ess_history: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def T(self) -> int:
        return self.particles.shape[0]

    @property
    def resampling_count(self) -> int:
        return len(self.resampling_times)

    def to_record(self, estimator: str = "psi-apf") -> dict:
        return {
            "estimator": estimator,
            "N": self.n_particles,
            "kappa": self.kappa,
            "seed": self.seed,
            "log_z": self.log_z,
            "resampling_count": self.resampling_count,
            "wall_time_ms": self.wall_time_ms,
        }


def _log_mean_exp(lw: np.ndarray) -> float:
    return float(logsumexp(lw) - np.log(lw.size))


def _check_collapse(lw: np.ndarray, t: int) -> np.ndarray:
    lw = np.where(np.isnan(lw), -np.inf, lw)
    if not np.any(np.isfinite(lw)):
        raise ParticleCollapseError(t)
    return lw


def run_psi_apf(
    model: HmmModel,
    psi: PsiSequence,
    config: FilterConfig,
    rng: np.random.Generator | None = None,
) -> FilterOutput:
    """Run the psi-APF with kappa-adaptive resampling.

    Particle weights are propagated without the log-scales of the twisting
    functions; those enter only through additive constants in the per-step
    means, so rescaling ``psi`` leaves every random draw unchanged.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tw = TwistedModel(model, psi)
    T, N, d = model.T, config.n_particles, model.dim_state
    particles = np.empty((T, N, d))
    log_weights = np.empty((T, N))
    ancestors = np.empty((T - 1, N), dtype=np.int64) if config.record_ancestry else None
    per_step = np.empty(T)
    ess_hist = np.empty(T)
    resampling_times = []
    threshold = config.kappa * N

    X = tw.sample_initial(rng, N)
    mix = tw.transition_mixture(2, X) if T > 1 else None
    lpt = logsumexp(mix[0], axis=1) if mix is not None else np.zeros(N)
    lw = _check_collapse(tw.log_g_unscaled(1, X, lpt), 1)
    offset = tw.log_g_offset(1)
    particles[0], log_weights[0] = X, lw + offset
    per_step[0] = _log_mean_exp(lw) + offset

    for t in range(2, T + 1):
        if config.adaptive:
            ess_hist[t - 2] = ess(lw)
            resample = ess_hist[t - 2] <= threshold
        else:
            ess_hist[t - 2] = np.nan
            resample = True
        mix_w, mix_m, mix_c = mix
        if resample:
            resampling_times.append(t - 1)
            idx = categorical_sample(rng, lw, N)
            mix_w, mix_m = mix_w[idx], mix_m[idx]
            if mix_c.shape[0] > 1:
                mix_c = mix_c[idx]
            base_lw, offset = 0.0, 0.0
        else:
            idx = np.arange(N)
            base_lw = lw
        if ancestors is not None:
            ancestors[t - 2] = idx
        X = _sample_mixture_rows(rng, mix_w, mix_m, mix_c)
        if t < T:
            mix = tw.transition_mixture(t + 1, X)
            lpt = logsumexp(mix[0], axis=1)
        else:
            mix, lpt = None, np.zeros(N)
        lw = _check_collapse(base_lw + tw.log_g_unscaled(t, X, lpt), t)
        offset += tw.log_g_offset(t)
        particles[t - 1], log_weights[t - 1] = X, lw + offset
        per_step[t - 1] = _log_mean_exp(lw) + offset
    ess_hist[T - 1] = ess(lw) if config.adaptive else np.nan

    terms = [per_step[s - 1] for s in resampling_times] + [per_step[T - 1]]
    return FilterOutput(
        particles=particles,
        log_weights=log_weights,
        ancestors=ancestors,
        resampling_times=tuple(resampling_times),
        log_z=float(np.sum(terms)),
        per_step_log_means=per_step,
        n_particles=N,
        kappa=config.kappa,
        seed=config.seed,
        wall_time_ms=1000.0 * (time.perf_counter() - start),
        ess_history=ess_hist,
    )


def run_bpf(model: HmmModel, config: FilterConfig, rng: np.random.Generator | None = None) -> FilterOutput:
    """Bootstrap particle filter: the psi-APF with constant twisting functions."""
    return run_psi_apf(model, PsiSequence.constant(model.dim_state, model.T), config, rng)


def ancestral_lineages(out: FilterOutput) -> np.ndarray:
    """``T x N`` matrix of 0-based lineage indices; row ``T-1`` is the identity."""
    if out.ancestors is None:
        raise ValueError("filter was run without recording ancestry")
    T, N = out.log_weights.shape
    B = np.empty((T, N), dtype=np.int64)
    B[T - 1] = np.arange(N)
    for t in range(T - 2, -1, -1):
        B[t] = out.ancestors[t][B[t + 1]]
    return B


def lineage_paths(out: FilterOutput) -> np.ndarray:
    """Ancestral paths of the terminal particles, shape ``(N, T, d)``."""
    B = ancestral_lineages(out)
    T = B.shape[0]
    return np.stack([out.particles[t, B[t]] for t in range(T)], axis=1)


def smoothing_expectation(out: FilterOutput, phi) -> float:
    """Self-normalized estimate of ``E[phi(X_{1:T}) | y_{1:T}]``.

    ``phi`` maps an array of paths ``(N, T, d)`` to ``(N,)`` values. Terminal
    particles are weighted by their accumulated weights.
    """
    values = np.asarray(phi(lineage_paths(out)), dtype=float)
    lw = out.log_weights[-1]
    w = np.exp(lw - lw.max())
    return float(np.dot(w, values) / w.sum())


def smoothing_gamma(out: FilterOutput, phi) -> float:
    """Unnormalized estimate ``pi^N(phi) * Z^N``."""
    return smoothing_expectation(out, phi) * float(np.exp(out.log_z))
