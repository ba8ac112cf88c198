"""Iterated auxiliary particle filter.

Alternates psi-APF runs with backward refits of the twisting functions until
the last ``k + 1`` likelihood estimates have relative standard deviation below
``tau``, doubling the particle count when the estimates oscillate, and then
returns the estimate of one more independent run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .filters import FilterConfig, ParticleCollapseError, run_psi_apf
from .hmm import HmmModel
from .learn import FitConfig, approximate_psi_sequence
from .twist import PsiSequence


@dataclass(frozen=True)
class IapfConfig:
    n0: int = 1000
    k: int = 3
    tau: float = 0.5
    kappa: float = 0.5
    seed: int = 0
    n_max: int = 1 << 22
    l_max: int = 200
    fit: FitConfig = FitConfig()

    def __post_init__(self):
        if self.n0 < 1 or self.k < 1:
            raise ValueError("n0 and k must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_max < self.n0 or self.l_max < self.k + 1:
            raise ValueError("caps must be at least the initial values")


@dataclass
class IterationRecord:
    l: int
    n_particles: int
    log_z: float
    resampling_count: int
    wall_time_ms: float
    psi: PsiSequence = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "l": self.l,
            "N": self.n_particles,
            "log_z": self.log_z,
            "resampling_count": self.resampling_count,
            "wall_time_ms": self.wall_time_ms,
        }


@dataclass
class IapfTrace:
    iterations: list = field(default_factory=list)
    termination: str = "running"
    final_n: int | None = None
    final_log_z: float | None = None
    final_resampling_count: int | None = None
    n_filter_runs: int = 0

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r.to_dict()) for r in self.iterations)


class IterationLimitError(RuntimeError):
    def __init__(self, trace: IapfTrace):
        super().__init__("iteration cap reached before the stopping rule fired")
        self.trace = trace


class ParticleLimitError(RuntimeError):
    def __init__(self, trace: IapfTrace):
        super().__init__("particle cap exceeded")
        self.trace = trace


@dataclass
class IapfResult:
    log_z: float
    psi: PsiSequence
    trace: IapfTrace
    output: object = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.log_z, self.psi, self.trace))


def relative_sd(log_z) -> float:
    """``sd(Z) / mean(Z)`` from log-estimates, sample sd with ``ddof=1``."""
    lz = np.asarray(log_z, dtype=float)
    z = np.exp(lz - lz.max())
    return float(np.std(z, ddof=1) / np.mean(z))


def should_stop(log_z, l: int, k: int, tau: float) -> bool:
    """Stop once ``l > k`` and the window ``Z_{l-k..l}`` has relative sd below ``tau``."""
    return l > k and relative_sd(log_z[l - k : l + 1]) < tau


def next_particle_count(counts, log_z, l: int, k: int) -> int:
    """Double ``N_l`` when ``N_{l-k} = N_l`` and ``Z_{l-k..l}`` is not weakly increasing."""
    if l < k:
        return counts[l]
    window = np.asarray(log_z[l - k : l + 1])
    increasing = bool(np.all(np.diff(window) >= 0))
    if counts[l - k] == counts[l] and not increasing:
        return 2 * counts[l]
    return counts[l]


def run_iapf(
    model: HmmModel,
    config: IapfConfig = IapfConfig(),
    *,
    filter_fn=run_psi_apf,
    approximate=approximate_psi_sequence,
) -> IapfResult:
    """Run the iterated APF; ``filter_fn`` and ``approximate`` are injectable for testing."""
    seeds = np.random.SeedSequence(config.seed)
    trace = IapfTrace()
    psi = PsiSequence.constant(model.dim_state, model.T)
    n = config.n0
    counts, log_z = [], []

    def run(psi, n):
        rng = np.random.default_rng(seeds.spawn(1)[0])
        trace.n_filter_runs += 1
        return filter_fn(model, psi, FilterConfig(n, config.kappa, config.seed), rng)

    l = 0
    while True:
        if l >= config.l_max:
            trace.termination = "iteration_limit"
            raise IterationLimitError(trace)
        start = time.perf_counter()
        try:
            out = run(psi, n)
        except ParticleCollapseError:
            n *= 2
            if n > config.n_max:
                trace.termination = "particle_limit"
                raise ParticleLimitError(trace)
            out = run(psi, n)
        counts.append(n)
        log_z.append(out.log_z)
        trace.iterations.append(
            IterationRecord(l, n, float(out.log_z), out.resampling_count, 1000.0 * (time.perf_counter() - start), psi)
        )
        if should_stop(log_z, l, config.k, config.tau):
            break
        psi = approximate(model, out, config.fit)
        n = next_particle_count(counts, log_z, l, config.k)
        if n > config.n_max:
            trace.termination = "particle_limit"
            raise ParticleLimitError(trace)
        l += 1

    final = run(psi, n)
    trace.termination = "converged"
    trace.final_n = n
    trace.final_log_z = float(final.log_z)
    trace.final_resampling_count = final.resampling_count
    return IapfResult(float(final.log_z), psi, trace, final)
