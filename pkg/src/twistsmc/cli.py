"""Command-line experiment runner.

Every subcommand reads an optional JSON config (unknown keys are rejected),
applies environment overrides (``TWISTSMC_SEED``, ``TWISTSMC_REPLICATES``,
``TWISTSMC_THREADS``, ``TWISTSMC_OUT``) and then command-line flags, in that
order of increasing precedence. Results are written as JSON lines (one
record per replicate) plus a summary JSON. Replicate ``i`` uses the seed
``splitmix64`` produces as the ``i``-th output of a stream started at the
master seed, so results do not depend on the number of worker processes.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import functools
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .filters import FilterConfig, ParticleCollapseError, run_bpf, run_psi_apf, smoothing_expectation
from .gaussian import DimensionError, NotPositiveDefiniteError
from .hmm import (
    HmmModel,
    ParameterError,
    band_covariance,
    build_linear_gaussian,
    build_multivariate_sv,
    build_banded_ar_model,
    build_univariate_sv,
    build_univariate_sv_stationary,
    load_observations_csv,
)
from .iapf import IapfConfig, IterationLimitError, ParticleLimitError, run_iapf
from .inference import (
    BpfEstimator,
    IapfEstimator,
    KalmanEstimator,
    MhConfig,
    Prior,
    run_pmmh,
)
from .learn import FitConfig, FitError
from .oracle import OracleError, kalman_log_likelihood
from .twist import PsiSequence

ENV_PREFIX = "TWISTSMC_"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

NUMERICAL_ERRORS = (
    ParticleCollapseError,
    IterationLimitError,
    ParticleLimitError,
    FitError,
    OracleError,
    NotPositiveDefiniteError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# seeding

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 step: advance the state by the golden gamma and mix."""
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def replicate_seed(master: int, index: int) -> int:
    """The ``index``-th (0-based) splitmix64 output of the stream seeded by ``master``."""
    return splitmix64((int(master) + int(index) * _GAMMA) & _MASK)


def replicate_rng(master: int, index: int) -> np.random.Generator:
    return np.random.default_rng(replicate_seed(master, index))


# ---------------------------------------------------------------------------
# config validation

COMMON_KEYS = {"seed": 0, "replicates": 1, "threads": 1, "out": None, "timing": False}

MODEL_KEYS = {
    "linear_gaussian": {"m": None, "Sigma": None, "A": None, "B": None, "C": None, "D": None},
    "banded_ar": {"d": 5, "alpha": 0.42},
    "univariate_sv": {"alpha": 0.984, "sigma": 0.145, "beta": 0.69, "stationary": False},
    "multivariate_sv": {"d": 20, "m": 0.0, "phi": 0.9, "u_diag": 0.2, "u_rho": 0.3},
}
MODEL_COMMON = {"family": None, "T": 100, "observations": None, "data_seed": 0}

ESTIMATOR_KEYS = {
    "bpf": {"N": 10000, "kappa": 0.5},
    "psi-apf": {"N": 1000, "kappa": 0.5, "psi": None},
    "iapf": {"n0": 1000, "k": 3, "tau": 0.5, "kappa": 0.5, "n_max": 1 << 22, "l_max": 200, "fit": None},
    "kalman": {},
}
FIT_KEYS = {"diagonal_only": True, "max_gauss_newton_iters": 50, "param_tolerance": 1e-8, "regularizer": "mass_over_N"}

COMMAND_KEYS = {
    "filter": {"model": None, "estimator": {"type": "bpf", "N": 1000}},
    "iapf": {"model": None, "iapf": {}},
    "bench-dim": {
        "dims": [5],
        "alpha": 0.42,
        "T": 100,
        "data_seed": 0,
        "estimators": [{"type": "iapf", "n0": 1000, "k": 5}, {"type": "bpf", "N": 10000}],
    },
    "bench-param": {
        "alphas": [round(0.3 + 0.02 * i, 2) for i in range(11)],
        "d": 10,
        "T": 100,
        "data_seed": 0,
        "estimators": [{"type": "iapf", "n0": 1000, "k": 5}, {"type": "bpf", "N": 10000}],
    },
    "pmmh": {"model": None, "parameters": None, "estimator": {"type": "kalman"}, "chain_length": 1000, "burn_in": 0},
    "profile": {"model": None, "points": None, "axis_offsets": None, "estimators": [{"type": "bpf", "N": 1000}]},
    "smooth": {"model": None, "iapf": {}, "N": 1000, "kappa": 0.5},
}


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _int(v, name: str, lo: int = 0) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < lo:
        raise ConfigError(f"{name} must be an integer >= {lo}")
    return int(v)


def validate_model(cfg) -> dict:
    if not isinstance(cfg, dict) or "family" not in cfg:
        raise ConfigError("model must be an object with a 'family' key")
    fam = cfg["family"]
    if fam not in MODEL_KEYS:
        raise ConfigError(f"unknown model family {fam!r}")
    allowed = {**MODEL_COMMON, **MODEL_KEYS[fam]}
    _check_keys(cfg, allowed, "model")
    out = {**allowed, **cfg}
    _int(out["T"], "model.T", 1)
    _int(out["data_seed"], "model.data_seed")
    if fam == "linear_gaussian":
        missing = [k for k in MODEL_KEYS[fam] if out[k] is None]
        if missing:
            raise ConfigError(f"linear_gaussian model needs {', '.join(missing)}")
    if fam in ("banded_ar", "multivariate_sv"):
        _int(out["d"], "model.d", 1)
    return out


def validate_estimator(cfg) -> dict:
    if not isinstance(cfg, dict) or cfg.get("type") not in ESTIMATOR_KEYS:
        raise ConfigError(f"estimator type must be one of {sorted(ESTIMATOR_KEYS)}")
    allowed = {"type": None, "label": None, **ESTIMATOR_KEYS[cfg["type"]]}
    _check_keys(cfg, allowed, f"{cfg['type']} estimator")
    out = {**allowed, **cfg}
    if out["label"] is None:
        out["label"] = cfg["type"]
    if out["type"] in ("bpf", "psi-apf"):
        _int(out["N"], "N", 1)
    if out["type"] == "iapf":
        iapf_config(out)
    return out


def iapf_config(cfg: dict) -> IapfConfig:
    fit = cfg.get("fit") or {}
    _check_keys(fit, FIT_KEYS, "fit")
    keys = ("n0", "k", "tau", "kappa", "n_max", "l_max")
    _check_keys({k: v for k, v in cfg.items() if k not in ("type", "label", "fit")}, keys, "iapf")
    defaults = ESTIMATOR_KEYS["iapf"]
    try:
        return IapfConfig(
            **{k: cfg.get(k, defaults[k]) for k in keys},
            fit=FitConfig(**{**FIT_KEYS, **fit}),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def validate_config(command: str, cfg: dict) -> dict:
    allowed = {**COMMON_KEYS, **COMMAND_KEYS[command]}
    _check_keys(cfg, allowed, "config")
    out = copy.deepcopy({**allowed, **cfg})
    _int(out["seed"], "seed")
    if out["seed"] > _MASK:
        raise ConfigError("seed must fit in 64 bits")
    _int(out["replicates"], "replicates", 1)
    _int(out["threads"], "threads", 1)
    if "model" in allowed and command not in ("bench-dim", "bench-param"):
        if out["model"] is None:
            raise ConfigError(f"{command} needs a model")
        out["model"] = validate_model(out["model"])
    if "estimator" in out:
        out["estimator"] = validate_estimator(out["estimator"])
    if "estimators" in out:
        if not isinstance(out["estimators"], list) or not out["estimators"]:
            raise ConfigError("estimators must be a non-empty list")
        out["estimators"] = [validate_estimator(e) for e in out["estimators"]]
        labels = [e["label"] for e in out["estimators"]]
        if len(set(labels)) != len(labels):
            raise ConfigError("estimator labels must be unique")
    if "iapf" in allowed:
        out["iapf"] = {"type": "iapf", **(out["iapf"] or {})}
        iapf_config(out["iapf"])
    if command == "filter" and out["estimator"]["type"] not in ("bpf", "psi-apf"):
        raise ConfigError("filter runs a bpf or psi-apf estimator")
    if command == "pmmh":
        _validate_parameters(out)
    if command == "profile" and out["points"] is None and out["axis_offsets"] is None:
        raise ConfigError("profile needs points or axis_offsets")
    if command == "bench-dim":
        for d in out["dims"]:
            _int(d, "dims entry", 1)
    if command == "smooth":
        _int(out["N"], "N", 1)
    return out


def _validate_parameters(cfg: dict) -> None:
    params = cfg["parameters"]
    if not isinstance(params, list) or not params:
        raise ConfigError("pmmh needs a non-empty parameters list")
    for p in params:
        _check_keys(p, {"name", "prior", "init", "proposal_sd"}, "parameter")
        if not {"name", "prior", "init", "proposal_sd"} <= set(p):
            raise ConfigError("each parameter needs name, prior, init and proposal_sd")
        _check_keys(p["prior"], {"kind", "params", "squared"}, "prior")
        try:
            Prior(p["prior"]["kind"], tuple(p["prior"].get("params", ())), bool(p["prior"].get("squared", False)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        _parse_name(p["name"], cfg["model"])
    _int(cfg["chain_length"], "chain_length", 1)
    _int(cfg["burn_in"], "burn_in")


_NAME = re.compile(r"^([A-Za-z_]+)(?:\[(\d+)\])?$")


def _parse_name(name: str, model_cfg: dict):
    m = _NAME.match(str(name))
    if not m or m.group(1) not in MODEL_KEYS[model_cfg["family"]]:
        raise ConfigError(f"parameter {name!r} is not a parameter of the {model_cfg['family']} family")
    return m.group(1), None if m.group(2) is None else int(m.group(2))


# ---------------------------------------------------------------------------
# models


def _vec(v, d: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    return np.full(d, float(a)) if a.ndim == 0 else a


def build_model(cfg: dict, observations=None) -> HmmModel:
    """Model with the given observations (``None`` leaves them unset)."""
    fam = cfg["family"]
    if fam == "linear_gaussian":
        return build_linear_gaussian(cfg["m"], cfg["Sigma"], cfg["A"], cfg["B"], cfg["C"], cfg["D"], observations)
    if fam == "banded_ar":
        return build_banded_ar_model(int(cfg["d"]), float(cfg["alpha"]), observations)
    if fam == "univariate_sv":
        build = build_univariate_sv_stationary if cfg["stationary"] else build_univariate_sv
        return build(float(cfg["alpha"]), float(cfg["sigma"]), float(cfg["beta"]), observations)
    d = int(cfg["d"])
    U = band_covariance(_vec(cfg["u_diag"], d), _vec(cfg["u_rho"], d - 1))
    return build_multivariate_sv(_vec(cfg["m"], d), _vec(cfg["phi"], d), U, observations)


def _canonical(cfg) -> str:
    return json.dumps(cfg, sort_keys=True)


@functools.lru_cache(maxsize=64)
def _observations_cached(key: str) -> np.ndarray:
    cfg = json.loads(key)
    structural = build_model(cfg)
    if cfg["observations"] is not None:
        y = load_observations_csv(cfg["observations"], structural.dim_obs)
        if y.shape[0] < cfg["T"]:
            raise ConfigError(f"observation file has {y.shape[0]} rows, T={cfg['T']} requested")
        return y[: cfg["T"]]
    _, y = structural.simulate(cfg["T"], np.random.default_rng(cfg["data_seed"]))
    return y


def observations_for(cfg: dict) -> np.ndarray:
    return _observations_cached(_canonical(cfg))


def model_with_data(cfg: dict) -> HmmModel:
    return build_model(cfg, observations_for(cfg))


def with_parameters(cfg: dict, names, values) -> dict:
    """Copy of a model config with named (optionally indexed) parameters replaced."""
    out = copy.deepcopy(cfg)
    for name, v in zip(names, values):
        key, idx = _parse_name(name, cfg)
        if idx is None:
            out[key] = float(v)
        else:
            dim = int(cfg.get("d", 1))
            base = out[key]
            arr = _vec(base, dim - 1 if key == "u_rho" else dim).tolist() if np.ndim(base) == 0 else list(base)
            if idx >= len(arr):
                raise ConfigError(f"index out of range in parameter {name!r}")
            arr[idx] = float(v)
            out[key] = arr
    return out


# ---------------------------------------------------------------------------
# estimators


def run_estimator(est: dict, model: HmmModel, seed: int) -> dict:
    """One likelihood estimate; returns log Z, resampling count and final N."""
    rng = np.random.default_rng(seed)
    kind = est["type"]
    if kind == "kalman":
        return {"log_z": kalman_log_likelihood(model).log_likelihood, "resampling_count": 0, "N": 0}
    if kind == "bpf":
        out = run_bpf(model, FilterConfig(est["N"], est["kappa"], seed, record_ancestry=False), rng)
        return {"log_z": out.log_z, "resampling_count": out.resampling_count, "N": est["N"]}
    if kind == "psi-apf":
        psi = _load_psi(est["psi"], model)
        out = run_psi_apf(model, psi, FilterConfig(est["N"], est["kappa"], seed, record_ancestry=False), rng)
        return {"log_z": out.log_z, "resampling_count": out.resampling_count, "N": est["N"]}
    res = run_iapf(model, dataclasses.replace(iapf_config(est), seed=seed))
    tr = res.trace
    return {
        "log_z": res.log_z,
        "resampling_count": tr.final_resampling_count,
        "N": tr.final_n,
        "iterations": len(tr.iterations),
    }


def _load_psi(path, model: HmmModel) -> PsiSequence:
    if path is None:
        return PsiSequence.constant(model.dim_state, model.T)
    psi = PsiSequence.from_json(Path(path).read_text())
    if len(psi) != model.T or psi.dim != model.dim_state:
        raise ConfigError("psi file does not match the model's T and state dimension")
    return psi


def _replicate_job(job: dict) -> dict:
    model = model_with_data(job["model"])
    start = time.perf_counter()
    rec = run_estimator(job["estimator"], model, job["seed"])
    rec = {**job["tags"], "estimator": job["estimator"]["label"], "replicate": job["replicate"], "seed": job["seed"], **rec}
    if job.get("timing"):
        rec["wall_time_ms"] = 1000.0 * (time.perf_counter() - start)
    return rec


def parallel_map(fn, jobs: list, threads: int) -> list:
    """Ordered map; results do not depend on ``threads``."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


# ---------------------------------------------------------------------------
# summaries


def summarize_ratio_records(records: list, group_keys=("d", "estimator")) -> list:
    """Per-group ``sd(Z/Z_true)`` (ddof=1), mean resampling count and mean log ratio.

    Groups appear in order of first occurrence. Records without ``log_z_true``
    get raw ``log Z`` summaries instead.
    """
    groups = {}
    for r in records:
        groups.setdefault(tuple(r.get(k) for k in group_keys), []).append(r)
    out = []
    for key, recs in groups.items():
        lz = np.array([r["log_z"] for r in recs], dtype=float)
        entry = dict(zip(group_keys, key))
        entry["replicates"] = len(recs)
        entry["mean_resampling_count"] = float(np.mean([r["resampling_count"] for r in recs]))
        if all(r.get("log_z_true") is not None for r in recs):
            ratio = np.exp(lz - np.array([r["log_z_true"] for r in recs]))
            entry["sd_ratio"] = float(np.std(ratio, ddof=1)) if len(recs) > 1 else 0.0
            entry["mean_ratio"] = float(np.mean(ratio))
            entry["mean_log_ratio"] = float(np.mean(np.log(ratio)))
        else:
            entry["mean_log_z"] = float(np.mean(lz))
            entry["sd_log_z"] = float(np.std(lz, ddof=1)) if len(recs) > 1 else 0.0
        out.append(entry)
    return out


def _box(x) -> dict:
    q = np.quantile(np.asarray(x, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


# ---------------------------------------------------------------------------
# subcommands


def _true_log_z(model: HmmModel):
    if not model.is_linear_gaussian:
        return None
    return kalman_log_likelihood(model).log_likelihood


def _replicate_jobs(cfg, model_cfg, estimators, tags, offset=0) -> list:
    jobs = []
    for est in estimators:
        for i in range(cfg["replicates"]):
            jobs.append(
                {
                    "model": model_cfg,
                    "estimator": est,
                    "seed": replicate_seed(cfg["seed"], offset + i),
                    "replicate": i,
                    "tags": tags,
                    "timing": cfg["timing"],
                }
            )
    return jobs


def cmd_filter(cfg: dict):
    model = model_with_data(cfg["model"])
    est = cfg["estimator"]
    if est["type"] == "psi-apf":
        _load_psi(est["psi"], model)
    jobs = _replicate_jobs(cfg, cfg["model"], [est], {})
    records = parallel_map(_replicate_job, jobs, cfg["threads"])
    for r in records:
        print(f"log_z={r['log_z']!r} resampling_count={r['resampling_count']}")
    truth = _true_log_z(model)
    for r in records:
        r["log_z_true"] = truth
    return records, {"groups": summarize_ratio_records(records, ("estimator",))}


def cmd_iapf(cfg: dict):
    model = model_with_data(cfg["model"])
    conf = iapf_config(cfg["iapf"])
    truth = _true_log_z(model)
    records, traces, psis = [], [], []
    for i in range(cfg["replicates"]):
        seed = replicate_seed(cfg["seed"], i)
        res = run_iapf(model, dataclasses.replace(conf, seed=seed))
        tr = res.trace
        for it in tr.iterations:
            row = it.to_dict()
            if not cfg["timing"]:
                row.pop("wall_time_ms")
            traces.append({"replicate": i, **row})
        records.append(
            {
                "replicate": i,
                "seed": seed,
                "estimator": "iapf",
                "log_z": res.log_z,
                "log_z_true": truth,
                "N": tr.final_n,
                "resampling_count": tr.final_resampling_count,
                "iterations": len(tr.iterations),
                "termination": tr.termination,
            }
        )
        psis.append(res.psi)
        print(f"log_z={res.log_z!r} N={tr.final_n} iterations={len(tr.iterations)}")
    summary = {"groups": summarize_ratio_records(records, ("estimator",))}
    return records, summary, {"trace.jsonl": _jsonl(traces), "psi.json": psis[0].to_json()}


def _bench(cfg: dict, points: list):
    """``points`` is a list of (tags, model config)."""
    jobs, truths = [], []
    for p, (tags, mcfg) in enumerate(points):
        truths.append(_true_log_z(model_with_data(mcfg)))
        jobs += _replicate_jobs(cfg, mcfg, cfg["estimators"], {**tags, "_point": p})
    records = parallel_map(_replicate_job, jobs, cfg["threads"])
    for r in records:
        r["log_z_true"] = truths[r.pop("_point")]
    return records


def cmd_bench_dim(cfg: dict):
    points = []
    for d in cfg["dims"]:
        mcfg = validate_model({"family": "banded_ar", "d": d, "alpha": cfg["alpha"], "T": cfg["T"], "data_seed": cfg["data_seed"]})
        points.append(({"d": d}, mcfg))
    records = _bench(cfg, points)
    return records, {"groups": summarize_ratio_records(records, ("d", "estimator"))}


def cmd_bench_param(cfg: dict):
    points = []
    for a in cfg["alphas"]:
        mcfg = validate_model({"family": "banded_ar", "d": cfg["d"], "alpha": a, "T": cfg["T"], "data_seed": cfg["data_seed"]})
        points.append(({"alpha": a}, mcfg))
    records = _bench(cfg, points)
    return records, {"groups": summarize_ratio_records(records, ("alpha", "estimator"))}


def _profile_points(cfg: dict) -> list:
    pts = []
    if cfg["points"] is not None:
        for p in cfg["points"]:
            if not isinstance(p, dict):
                raise ConfigError("profile points must be objects of parameter values")
            pts.append(dict(p))
    if cfg["axis_offsets"] is not None:
        for name, offsets in cfg["axis_offsets"].items():
            key, _ = _parse_name(name, cfg["model"])
            for off in offsets:
                pts.append({name: float(cfg["model"][key]) + float(off)})
    return pts


def cmd_profile(cfg: dict):
    observations_for(cfg["model"])
    points = []
    for p in _profile_points(cfg):
        mcfg = with_parameters(cfg["model"], list(p), list(p.values()))
        # every point shares the base data set
        mcfg = {**mcfg, "observations": None, "_data": _canonical(cfg["model"])}
        points.append(({"point": p}, mcfg))
    jobs = []
    for k, (tags, mcfg) in enumerate(points):
        jobs += _replicate_jobs(cfg, mcfg, cfg["estimators"], {**tags, "point_index": k})
    records = parallel_map(_profile_job, jobs, cfg["threads"])
    summary = []
    for k, (tags, _) in enumerate(points):
        for est in cfg["estimators"]:
            lz = [r["log_z"] for r in records if r["point_index"] == k and r["estimator"] == est["label"]]
            summary.append({"point_index": k, **tags, "estimator": est["label"], "mean_log_z": float(np.mean(lz)), **_box(lz)})
    return records, {"groups": summary}


def _profile_job(job: dict) -> dict:
    mcfg = dict(job["model"])
    base = json.loads(mcfg.pop("_data"))
    model = build_model(mcfg, observations_for(base))
    rec = run_estimator(job["estimator"], model, job["seed"])
    return {**job["tags"], "estimator": job["estimator"]["label"], "replicate": job["replicate"], "seed": job["seed"], **rec}


def _priors_and_builder(cfg: dict):
    params = cfg["parameters"]
    names = [p["name"] for p in params]
    priors = [Prior(p["prior"]["kind"], tuple(p["prior"].get("params", ())), bool(p["prior"].get("squared", False))) for p in params]
    y = observations_for(cfg["model"])

    def builder(theta):
        return build_model(with_parameters(cfg["model"], names, theta), y)

    return names, priors, builder


def _mh_estimator(est: dict):
    if est["type"] == "kalman":
        return KalmanEstimator()
    if est["type"] == "bpf":
        return BpfEstimator(est["N"], est["kappa"])
    if est["type"] == "iapf":
        return IapfEstimator(iapf_config(est))
    raise ConfigError("pmmh estimators are kalman, bpf or iapf")


def cmd_pmmh(cfg: dict):
    names, priors, builder = _priors_and_builder(cfg)
    est = _mh_estimator(cfg["estimator"])
    theta0 = [p["init"] for p in cfg["parameters"]]
    sds = tuple(p["proposal_sd"] for p in cfg["parameters"])
    for pr, v in zip(priors, theta0):
        if not pr.in_support(v):
            raise ConfigError("initial parameter value lies outside its prior support")
    records, files = [], {}
    for i in range(cfg["replicates"]):
        seed = replicate_seed(cfg["seed"], i)
        chain = run_pmmh(builder, priors, theta0, MhConfig(cfg["chain_length"], sds, est, seed), names)
        s = chain.summary(cfg["burn_in"])
        records.append({"replicate": i, "seed": seed, "estimator": cfg["estimator"]["label"], **s})
        files[f"chain_{i}.csv"] = chain
    return records, {"chains": records}, files


def cmd_smooth(cfg: dict):
    model = model_with_data(cfg["model"])
    conf = iapf_config(cfg["iapf"])
    psi = run_iapf(model, dataclasses.replace(conf, seed=replicate_seed(cfg["seed"], 0))).psi
    T, d = model.T, model.dim_state
    records = []
    for i in range(cfg["replicates"]):
        seed = replicate_seed(cfg["seed"], i + 1)
        out = run_psi_apf(model, psi, FilterConfig(cfg["N"], cfg["kappa"], seed), np.random.default_rng(seed))
        means = [[smoothing_expectation(out, lambda P, t=t, j=j: P[:, t, j]) for j in range(d)] for t in range(T)]
        records.append({"replicate": i, "seed": seed, "log_z": out.log_z, "means": means})
    est = np.array([r["means"] for r in records])
    summary = {"estimate": est.mean(axis=0).tolist()}
    if len(records) > 1:
        summary["standard_error"] = (est.std(axis=0, ddof=1) / np.sqrt(len(records))).tolist()
    if model.is_linear_gaussian:
        summary["kalman_smoother_mean"] = kalman_log_likelihood(model).smooth_means.tolist()
    return records, summary


COMMANDS = {
    "filter": cmd_filter,
    "iapf": cmd_iapf,
    "bench-dim": cmd_bench_dim,
    "bench-param": cmd_bench_param,
    "pmmh": cmd_pmmh,
    "profile": cmd_profile,
    "smooth": cmd_smooth,
}


# ---------------------------------------------------------------------------
# entry point


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def load_config(command: str, path=None, env=None, overrides=None) -> dict:
    """Merge defaults, config file, environment and flags, then validate."""
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    env = os.environ if env is None else env
    for key in ("seed", "replicates", "threads"):
        v = env.get(ENV_PREFIX + key.upper())
        if v is not None:
            try:
                cfg[key] = int(v)
            except ValueError as exc:
                raise ConfigError(f"{ENV_PREFIX}{key.upper()} must be an integer") from exc
    if env.get(ENV_PREFIX + "OUT"):
        cfg["out"] = env[ENV_PREFIX + "OUT"]
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return validate_config(command, cfg)


def run_experiment(command: str, cfg: dict) -> dict:
    """Run a validated config and write its outputs; returns the summary."""
    result = COMMANDS[command](cfg)
    records, summary = result[0], result[1]
    extra = result[2] if len(result) > 2 else {}
    summary = {"command": command, "seed": cfg["seed"], "replicates": cfg["replicates"], **summary}
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.jsonl").write_text(_jsonl(records))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        for name, content in extra.items():
            if hasattr(content, "write_csv"):
                content.write_csv(out / name)
            else:
                (out / name).write_text(content)
    else:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twistsmc", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--replicates", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", type=str)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "replicates", "threads", "out")}
    try:
        cfg = load_config(args.command, args.config, overrides=overrides)
        run_experiment(args.command, cfg)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ParameterError, DimensionError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
