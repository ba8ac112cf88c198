"""Twisted sequential Monte Carlo: psi-auxiliary particle filters, the iterated
APF, exact oracles for linear-Gaussian models and particle MCMC."""

from .filters import FilterConfig, FilterOutput, ParticleCollapseError, run_bpf, run_psi_apf, smoothing_expectation
from .gaussian import GaussianComponent, ess, logsumexp
from .hmm import (
    HmmModel,
    ParameterError,
    build_linear_gaussian,
    build_multivariate_sv,
    build_banded_ar_model,
    build_univariate_sv,
)
from .iapf import IapfConfig, IapfResult, run_iapf
from .inference import MhConfig, Prior, iact, run_pmmh
from .learn import FitConfig, approximate_psi_sequence, fit_gaussian
from .oracle import kalman_log_likelihood
from .twist import PsiFunction, PsiSequence, TwistedModel, exact_psi_star_lgssm

__version__ = "0.1.0"
