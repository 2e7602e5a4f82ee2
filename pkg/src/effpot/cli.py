"""Command-line driver: ``effpot <subcommand> --config run.json --out DIR``.

Subcommands: ``estimate-cov``, ``learn``, ``scale-scan``,
``surrogate-compare`` and ``gradient-check``.  Every run writes
``manifest.json`` next to its outputs.  Exit codes: 0 success,
2 invalid configuration, 3 divergence, 4 normality gate failed,
5 missing input artifact.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import resolve_jobs
from .covariance import (CovarianceEstimate, build_probe_plan, estimate_covariance,
                         friction_from_covariance)
from .equilibrium import FittedPotential, learn_potential, scale_scan
from .errors import (ConfigurationError, DegenerateDataError, DivergenceError, EffPotError,
                     IllPosedFitError, InsufficientDataError)
from .integrators import SimConfig, State
from .potentials import (BUILTIN_KINDS, DEFAULT_PARAMS, BuiltinSpec, PotentialOracle,
                         gradient_check, make_builtin)
from .surrogate import Distribution, EnsembleConfig, compare_reports, diagnose, run_ensemble

log = logging.getLogger("effpot")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NOT_NORMAL = 4
EXIT_MISSING = 5

COMMANDS = ("estimate-cov", "learn", "scale-scan", "surrogate-compare", "gradient-check")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _num(data, key, default=None, *, positive=False, nonneg=False, integer=False, section=""):
    name = f"{section}.{key}" if section else key
    if key not in data or data[key] is None:
        if default is None:
            return None
        val = default
    else:
        val = data[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigurationError("must be a number", name)
    val = float(val)
    if not math.isfinite(val):
        raise ConfigurationError("must be finite", name)
    if positive and not val > 0:
        raise ConfigurationError("must be positive", name)
    if nonneg and val < 0:
        raise ConfigurationError("must be nonnegative", name)
    if integer:
        if not val.is_integer():
            raise ConfigurationError("must be an integer", name)
        return int(val)
    return val


def _vector(data, key, d, default, section=""):
    name = f"{section}.{key}" if section else key
    val = data.get(key, default)
    arr = np.asarray(val, dtype=float).reshape(-1)
    if arr.size == 1 and d > 1:
        arr = np.full(d, arr[0])
    if arr.shape != (d,) or not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"must be {d} finite numbers", name)
    return arr


def _matrix(val, d, name):
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigurationError("must be a number or matrix", name)
    if arr.ndim == 0:
        arr = arr * np.eye(d)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (d, d) or not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"must be a {d}x{d} matrix", name)
    return arr


_KNOWN = {
    "top": {"potential", "seed", "delta", "gamma", "n_steps", "burn_in", "subsample", "init",
            "bins", "basis_size", "smoothing", "count_floor", "normality_threshold",
            "normality_points", "friction", "covariance", "scan", "surrogate", "gradient_check",
            "description"},
    "covariance": {"gamma", "n_steps", "burn_in", "probe_scale", "path", "noise_cov",
                   "subsample"},
    "surrogate": {"fit", "mode", "n_traj", "horizon", "full_step", "step", "store_dt",
                  "friction", "beta", "init_q", "init_p", "bins", "max_lag", "late_fraction",
                  "references", "dump_trajectories", "domain_margin"},
}


def _check_keys(data, allowed, section):
    extra = set(data) - allowed
    if extra:
        raise ConfigurationError(f"unknown keys {sorted(extra)}", section or "config")


@dataclass
class RunConfig:
    """Validated run configuration (see README for the JSON schema)."""

    raw: dict
    potential: dict
    dim: int
    seed: int
    delta: float | None
    gamma: float
    n_steps: int
    burn_in: int | None
    subsample: int
    init_q: np.ndarray
    init_p: np.ndarray
    bins: object
    basis_size: int
    smoothing: float
    count_floor: int
    threshold: float
    normality_points: int
    covariance: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)
    surrogate: dict = field(default_factory=dict)
    gradient_points: np.ndarray | None = None
    friction: np.ndarray | None = None

    @classmethod
    def from_dict(cls, data, seed=None):
        if not isinstance(data, dict):
            raise ConfigurationError("top level must be a JSON object", "config")
        _check_keys(data, _KNOWN["top"], "")
        pot = data.get("potential")
        if not isinstance(pot, dict):
            raise ConfigurationError("missing potential declaration", "potential")
        oracle = load_potential(pot)
        d = oracle.dim
        seed = _num(data, "seed", 0, nonneg=True, integer=True) if seed is None else seed
        if isinstance(seed, float) or int(seed) < 0 or int(seed) >= 2 ** 64:
            raise ConfigurationError("must be an integer in [0, 2^64)", "seed")
        n_steps = _num(data, "n_steps", 1e8 if d == 1 else 2e7, positive=True, integer=True)
        burn_in = _num(data, "burn_in", None, nonneg=True, integer=True)
        if burn_in is not None and burn_in >= n_steps:
            raise ConfigurationError("must be smaller than n_steps", "burn_in")
        init = data.get("init", {})
        if not isinstance(init, dict):
            raise ConfigurationError("must be an object with q and p", "init")
        bins = data.get("bins", 200 if d == 1 else 80)
        bins_arr = np.atleast_1d(np.asarray(bins))
        if (bins_arr.size not in (1, d) or bins_arr.dtype.kind not in "iu"
                or np.any(bins_arr < 10)):
            raise ConfigurationError("must be an integer >= 10 or one per dimension", "bins")
        threshold = _num(data, "normality_threshold", 0.01, positive=True)
        if threshold >= 1:
            raise ConfigurationError("must lie in (0, 1)", "normality_threshold")
        cov = data.get("covariance", {}) or {}
        _check_keys(cov, _KNOWN["covariance"], "covariance")
        cov_cfg = {
            "gamma": _num(cov, "gamma", 0.1, positive=True, section="covariance"),
            "n_steps": _num(cov, "n_steps", n_steps, positive=True, integer=True,
                            section="covariance"),
            "burn_in": _num(cov, "burn_in", None, nonneg=True, integer=True, section="covariance"),
            "subsample": _num(cov, "subsample", None, positive=True, integer=True,
                              section="covariance"),
            "probe_scale": _num(cov, "probe_scale", 1.0, positive=True, section="covariance"),
            "path": cov.get("path"),
            "noise_cov": None,
        }
        if cov.get("noise_cov") is not None:
            z = _matrix(cov["noise_cov"], d, "covariance.noise_cov")
            if not np.allclose(z, z.T) or np.linalg.eigvalsh(z).min() < 0:
                raise ConfigurationError("must be symmetric positive semidefinite",
                                         "covariance.noise_cov")
            cov_cfg["noise_cov"] = z
        scan = data.get("scan", {}) or {}
        scan_cfg = {}
        if "deltas" in scan:
            ds = scan["deltas"]
            if not isinstance(ds, list) or not ds:
                raise ConfigurationError("must be a non-empty list", "scan.deltas")
            vals = [_num({"x": x}, "x", positive=True, section="scan.deltas") for x in ds]
            if any(b >= a for a, b in zip(vals, vals[1:])):
                raise ConfigurationError("must be strictly decreasing", "scan.deltas")
            scan_cfg["deltas"] = vals
        sur = data.get("surrogate", {}) or {}
        _check_keys(sur, _KNOWN["surrogate"], "surrogate")
        sur_cfg = _surrogate_section(sur, d)
        gc = data.get("gradient_check", {}) or {}
        pts = None
        if "points" in gc:
            pts = np.asarray(gc["points"], dtype=float).reshape(-1, d)
        delta = _num(data, "delta", None, positive=True)
        fric = None
        if data.get("friction") is not None:
            fric = _matrix(data["friction"], d, "friction")
            if not np.allclose(fric, fric.T) or np.linalg.eigvalsh(fric).min() <= 0:
                raise ConfigurationError("must be symmetric positive definite", "friction")
        basis = _num(data, "basis_size", 30, positive=True, integer=True)
        return cls(
            raw=data, potential=pot, dim=d, seed=int(seed), delta=delta,
            gamma=_num(data, "gamma", 0.1, positive=True),
            n_steps=n_steps, burn_in=burn_in,
            subsample=_num(data, "subsample", 1, positive=True, integer=True),
            init_q=_vector(init, "q", d, 0.0, "init"),
            init_p=_vector(init, "p", d, 1.0, "init"),
            bins=bins, basis_size=basis,
            smoothing=_num(data, "smoothing", 2.0, positive=True),
            count_floor=_num(data, "count_floor", 5, positive=True, integer=True),
            threshold=threshold,
            normality_points=_num(data, "normality_points", 5000, positive=True, integer=True),
            covariance=cov_cfg, scan=scan_cfg, surrogate=sur_cfg, gradient_points=pts,
            friction=fric,
        )

    def resolved(self):
        """Every knob after defaults were applied."""
        out = {k: v for k, v in self.__dict__.items() if k != "raw"}
        sur = dict(out["surrogate"])
        for key in ("init_q", "init_p"):
            if key in sur:
                sur[key] = sur[key].to_dict()
        out["surrogate"] = sur
        return _jsonable(out)

    def oracle(self):
        return load_potential(self.potential)

    def require_delta(self):
        if self.delta is None:
            raise ConfigurationError("required for this subcommand", "delta")
        return self.delta

    def sim_config(self, friction, delta=None):
        return SimConfig(delta=delta or self.require_delta(), dim=self.dim, friction=friction,
                         n_steps=self.n_steps, burn_in=self.burn_in, subsample=self.subsample,
                         seed=self.seed)

    def init_state(self):
        return State(self.init_q, self.init_p)


def _surrogate_section(sur, d):
    s = "surrogate"
    out = {
        "fit": sur.get("fit"),
        "mode": sur.get("mode", "langevin"),
        "n_traj": _num(sur, "n_traj", 500, positive=True, integer=True, section=s),
        "horizon": _num(sur, "horizon", 50.0, positive=True, section=s),
        "full_step": _num(sur, "full_step", 5e-4, positive=True, section=s),
        "step": _num(sur, "step", 0.1, positive=True, section=s),
        "store_dt": _num(sur, "store_dt", None, positive=True, section=s),
        "friction": sur.get("friction", 0.1),
        "beta": _num(sur, "beta", None, positive=True, section=s),
        "bins": _num(sur, "bins", 30, positive=True, integer=True, section=s),
        "max_lag": _num(sur, "max_lag", None, nonneg=True, integer=True, section=s),
        "late_fraction": _num(sur, "late_fraction", 0.5, nonneg=True, section=s),
        "dump_trajectories": _num(sur, "dump_trajectories", 0, nonneg=True, integer=True,
                                  section=s),
        "domain_margin": _num(sur, "domain_margin", 0.25, nonneg=True, section=s),
        "references": sur.get("references", []),
    }
    if out["mode"] not in ("langevin", "hamiltonian", "both"):
        raise ConfigurationError("must be langevin, hamiltonian or both", "surrogate.mode")
    if out["late_fraction"] >= 1:
        raise ConfigurationError("must lie in [0, 1)", "surrogate.late_fraction")
    out["friction"] = _matrix(out["friction"], d, "surrogate.friction")
    if np.linalg.eigvalsh(0.5 * (out["friction"] + out["friction"].T)).min() < 0:
        raise ConfigurationError("must be positive semidefinite", "surrogate.friction")
    if out["store_dt"] is None:
        out["store_dt"] = out["step"]
    for key in ("init_q", "init_p"):
        spec = sur.get(key, {"kind": "normal", "loc": 0.0, "scale": 1.0})
        try:
            out[key] = Distribution.from_dict(spec)
        except TypeError as exc:
            raise ConfigurationError(str(exc), f"surrogate.{key}")
    for step_key in ("step", "full_step"):
        try:
            EnsembleConfig(1, out["horizon"], out[step_key], store_dt=out["store_dt"],
                           noise_step=out["full_step"])
        except ConfigurationError as exc:
            raise ConfigurationError(f"{exc} (step {out[step_key]})", f"surrogate.{step_key}")
    refs = out["references"]
    if not isinstance(refs, list):
        raise ConfigurationError("must be a list of potential declarations",
                                 "surrogate.references")
    for k, ref in enumerate(refs):
        if not isinstance(ref, dict) or "label" not in ref or "potential" not in ref:
            raise ConfigurationError("each entry needs label and potential",
                                     f"surrogate.references[{k}]")
        load_potential(ref["potential"])
    return out


def load_potential(decl) -> PotentialOracle:
    """Built-in ``{"kind": ..., "params": {...}, "component": "V0"}`` or external
    ``{"external": "module:attr"}`` where ``attr`` is an oracle or a
    zero-argument factory returning one."""
    if "external" in decl:
        target = decl["external"]
        if not isinstance(target, str) or ":" not in target:
            raise ConfigurationError("must look like 'module:attribute'", "potential.external")
        mod, attr = target.split(":", 1)
        try:
            obj = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigurationError(f"cannot load {target}: {exc}", "potential.external")
        oracle = obj() if callable(obj) and not isinstance(obj, PotentialOracle) else obj
        if not isinstance(oracle, PotentialOracle):
            raise ConfigurationError("does not provide a PotentialOracle", "potential.external")
        return oracle
    kind = decl.get("kind")
    if kind not in BUILTIN_KINDS:
        raise ConfigurationError(f"must be one of {BUILTIN_KINDS}", "potential.kind")
    params = decl.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigurationError("must be an object", "potential.params")
    full = make_builtin(BuiltinSpec(kind, {**DEFAULT_PARAMS[kind], **params}))
    comp = decl.get("component")
    if comp is None:
        return full
    if comp not in full.components:
        raise ConfigurationError(f"must be one of {sorted(full.components)}", "potential.component")
    return full.components[comp]


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_csv(path, header, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(x) for x in r) + "\n")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, State):
        return {"q": obj.q.tolist(), "p": obj.p.tolist()}
    return obj


class Run:
    """Collects outputs, timings and warnings for the manifest."""

    def __init__(self, out, command, cfg: RunConfig, jobs):
        self.out = Path(out)
        self.command = command
        self.cfg = cfg
        self.jobs = jobs
        self.files = []
        self.warnings = []
        self.stages = {}
        self.seeds = {}
        self._t = None

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.stages[name] = time.perf_counter() - self.t0

        return _Timer()

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)

    def manifest(self, status, exit_code, extra=None):
        import numba
        import scipy

        inventory = [{"path": f, "bytes": (self.out / f).stat().st_size}
                     for f in sorted(set(self.files)) if (self.out / f).exists()]
        data = {
            "command": self.command,
            "status": status,
            "exit_code": exit_code,
            "config": self.cfg.raw,
            "resolved_config": self.cfg.resolved(),
            "seed": self.cfg.seed,
            "seeds": self.seeds,
            "jobs": self.jobs,
            "versions": {"effpot": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "numba": numba.__version__},
            "wall_clock_s": self.stages,
            "outputs": inventory,
            "warnings": self.warnings,
        }
        if extra:
            data.update(extra)
        write_json(self.out / "manifest.json", data)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_estimate_cov(cfg: RunConfig, run: Run):
    oracle = cfg.oracle()
    c = cfg.covariance
    plan = build_probe_plan(cfg.dim, c["gamma"], c["probe_scale"])
    with run.stage("probes"):
        est = estimate_covariance(oracle, plan, cfg.require_delta(), c["n_steps"], seed=cfg.seed,
                                  init=cfg.init_state(), burn_in=c["burn_in"],
                                  subsample=c["subsample"], noise_cov=c["noise_cov"],
                                  jobs=run.jobs)
    run.seeds["probes"] = [[cfg.seed, k] for k in range(len(plan.probes))]
    if est.projected:
        run.warn(f"covariance projected to PSD (correction {est.projection_norm:.3g})")
    write_json(run.path("covariance.json"), est.to_dict())
    return est


def _friction(cfg: RunConfig, run: Run):
    """Stage-2 friction: explicit override, scalar gamma in 1D, else Z/2."""
    if cfg.friction is not None:
        run.warn("explicit friction given; covariance calibration skipped")
        return cfg.friction
    if cfg.dim == 1:
        return cfg.gamma
    path = cfg.covariance.get("path")
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        est = CovarianceEstimate.from_json(path)
        if est.dim != cfg.dim:
            raise ConfigurationError("covariance dimension differs from potential",
                                     "covariance.path")
    else:
        est = cmd_estimate_cov(cfg, run)
    return friction_from_covariance(est)


def _write_fit(run, prefix, res):
    write_json(run.path(f"{prefix}normality.json"), res.normality.to_dict())
    if res.histogram is not None:
        h = res.histogram
        cols = [f"q{i + 1}" for i in range(h.dim)] + ["count", "density"]
        write_csv(run.path(f"{prefix}histogram.csv"), cols, h.rows())
    if res.fit is not None:
        write_json(run.path(f"{prefix}fit.json"), res.fit.to_dict())


def cmd_learn(cfg: RunConfig, run: Run):
    oracle = cfg.oracle()
    friction = _friction(cfg, run)
    with run.stage("simulate_and_fit"):
        res = learn_potential(oracle, cfg.sim_config(friction), cfg.init_state(), bins=cfg.bins,
                              basis_size=cfg.basis_size, count_floor=cfg.count_floor,
                              smoothing=cfg.smoothing, threshold=cfg.threshold,
                              normality_points=cfg.normality_points)
    for w in res.warnings:
        run.warn(w)
    _write_fit(run, "", res)
    write_json(run.path("learn.json"), {
        "beta_hat": res.beta_hat,
        "friction": np.atleast_2d(friction),
        "samples": res.samples_meta,
        "normality": res.normality.verdict,
    })
    if res.fit is None:
        return EXIT_NOT_NORMAL
    return EXIT_OK


def cmd_scale_scan(cfg: RunConfig, run: Run):
    if "deltas" not in cfg.scan:
        raise ConfigurationError("required for scale-scan", "scan.deltas")
    oracle = cfg.oracle()
    friction = _friction(cfg, run)
    base = cfg.sim_config(friction, delta=cfg.scan["deltas"][0])
    with run.stage("scan"):
        entries = scale_scan(oracle, cfg.scan["deltas"], base, cfg.init_state(), jobs=run.jobs,
                             bins=cfg.bins, basis_size=cfg.basis_size,
                             count_floor=cfg.count_floor, smoothing=cfg.smoothing,
                             threshold=cfg.threshold, normality_points=cfg.normality_points)
    table = []
    for k, e in enumerate(entries):
        row = e.to_dict()
        if e.ok:
            name = f"fit_{k}.json"
            write_json(run.path(name), e.fit.to_dict())
            row["fit"] = name
        elif e.error:
            run.warn(f"delta={e.delta}: {e.error}")
        else:
            run.warn(f"delta={e.delta}: normality gate failed")
        table.append(row)
    write_json(run.path("scan.json"), {"entries": table})
    return EXIT_OK if any(e.ok for e in entries) else EXIT_NOT_NORMAL


def _write_report(run, prefix, rep):
    d = rep.mean_path.shape[1]
    write_csv(run.path(f"{prefix}mean_path.csv"), ["t"] + [f"q{i + 1}" for i in range(d)],
              np.column_stack([rep.t, rep.mean_path]))
    write_csv(run.path(f"{prefix}acf.csv"), ["tau"] + [f"acf{i + 1}" for i in range(d)],
              np.column_stack([rep.lags, rep.acf]))
    h = rep.equilibrium_hist
    write_csv(run.path(f"{prefix}equilibrium.csv"),
              [f"q{i + 1}" for i in range(h.dim)] + ["count", "density"], h.rows())
    if rep.phase_portrait is not None:
        write_csv(run.path(f"{prefix}phase.csv"),
                  [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)],
                  rep.phase_portrait)
    write_json(run.path(f"{prefix}report.json"),
               {"n_used": rep.n_used, "n_excluded": rep.n_excluded})


def _dump(run, prefix, ens, count):
    d = ens.qs.shape[2]
    header = ["t"] + [f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
    for k in range(min(count, ens.qs.shape[0])):
        write_csv(run.path(f"{prefix}traj_{k:04d}.csv"), header,
                  np.column_stack([ens.t, ens.qs[k], ens.ps[k]]))


def cmd_surrogate_compare(cfg: RunConfig, run: Run):
    s = cfg.surrogate
    path = s["fit"]
    if not path or not os.path.exists(path):
        raise FileNotFoundError(path or "surrogate.fit")
    with open(path) as fh:
        fit = FittedPotential.from_dict(json.load(fh))
    full = cfg.oracle()
    if fit.dim != full.dim:
        raise ConfigurationError("fit dimension differs from potential", "surrogate.fit")
    beta = s["beta"] if s["beta"] is not None else fit.beta_hat
    models = [("full", full, s["full_step"]), ("surrogate", fit, s["step"])]
    for ref in s["references"]:
        models.append((ref["label"], load_potential(ref["potential"]), ref.get("step", s["step"])))
    modes = ["hamiltonian", "langevin"] if s["mode"] == "both" else [s["mode"]]
    summary = {}
    for mode in modes:
        ens = {}
        with run.stage(f"{mode}_ensembles"):
            for label, pot, step in models:
                n_traj = 1 if mode == "hamiltonian" else s["n_traj"]
                ec = EnsembleConfig(n_traj, s["horizon"], step, s["init_q"], s["init_p"],
                                    seed=cfg.seed, store_dt=s["store_dt"],
                                    noise_step=s["full_step"])
                ens[label] = run_ensemble(pot, mode, ec, friction=s["friction"], beta=beta,
                                          jobs=run.jobs, domain_margin=s["domain_margin"])
                run.seeds[f"{mode}/{label}"] = [cfg.seed, "per-trajectory index"]
        # trajectories excluded anywhere are dropped everywhere; the
        # ensembles share initial conditions and noise trajectory by trajectory
        mask = np.zeros(len(ens["full"].excluded), dtype=bool)
        for e in ens.values():
            mask |= e.excluded
        if mask.any():
            run.warn(f"{mode}: {int(mask.sum())} trajectories left a fitted domain and were excluded")
        for e in ens.values():
            e.excluded = mask.copy()
        if mode == "hamiltonian":
            for label, e in ens.items():
                write_csv(run.path(f"hamiltonian/{label}/phase.csv"),
                          [f"q{i + 1}" for i in range(e.qs.shape[2])]
                          + [f"p{i + 1}" for i in range(e.qs.shape[2])],
                          np.column_stack([e.qs[0], e.ps[0]]))
            continue
        late = int(np.searchsorted(ens["full"].t, s["late_fraction"] * ens["full"].t[-1]))
        pooled = np.concatenate([e.kept()[:, late:].reshape(-1, e.qs.shape[2]) for e in ens.values()])
        rng_hist = [(float(pooled[:, i].min()), float(pooled[:, i].max()))
                    for i in range(pooled.shape[1])]
        reports = {label: diagnose(e, s["max_lag"], s["late_fraction"], s["bins"], rng_hist)
                   for label, e in ens.items()}
        for label, rep in reports.items():
            _write_report(run, f"langevin/{label}/", rep)
            if s["dump_trajectories"]:
                _dump(run, f"langevin/{label}/", ens[label], s["dump_trajectories"])
        for label in reports:
            if label == "full":
                continue
            cmp = compare_reports(reports["full"], reports[label])
            for w in cmp["warnings"]:
                run.warn(f"{label}: {w}")
            summary[label] = cmp
    write_json(run.path("comparison.json"), {"beta": beta, "discrepancies": summary})
    return EXIT_OK


def cmd_gradient_check(cfg: RunConfig, run: Run):
    oracle = cfg.oracle()
    pts = cfg.gradient_points
    if pts is None:
        rng = np.random.default_rng(cfg.seed)
        pts = rng.uniform(-2.0, 2.0, (20, cfg.dim))
    rep = gradient_check(oracle, pts)
    report = {"potential": oracle.name, "step": rep.step, "max_rel_error": rep.max_rel_error,
              "errors": rep.errors, "points": pts}
    if hasattr(oracle, "components") and oracle.components:
        report["components"] = {k: gradient_check(c, pts).max_rel_error
                                for k, c in oracle.components.items()}
    write_json(run.path("gradient_check.json"), report)
    return EXIT_OK


HANDLERS = {
    "estimate-cov": lambda c, r: (cmd_estimate_cov(c, r), EXIT_OK)[1],
    "learn": cmd_learn,
    "scale-scan": cmd_scale_scan,
    "surrogate-compare": cmd_surrogate_compare,
    "gradient-check": cmd_gradient_check,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="effpot", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--jobs", type=int, default=None,
                    help="worker processes (default: $EFFPOT_JOBS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_MISSING
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigurationError("must be at least 1", "--jobs")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigurationError("must be in [0, 2^64)", "--seed")
        cfg = RunConfig.from_dict(raw, seed=args.seed)
        if args.command in ("estimate-cov", "learn"):
            cfg.require_delta()
        if args.command == "scale-scan" and "deltas" not in cfg.scan:
            raise ConfigurationError("required for scale-scan", "scan.deltas")
        if args.command == "surrogate-compare" and not cfg.surrogate.get("fit"):
            raise ConfigurationError("required for surrogate-compare", "surrogate.fit")
    except ConfigurationError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(out, args.command, cfg, resolve_jobs(args.jobs))
    code, status, extra = EXIT_OK, "ok", {}
    try:
        code = HANDLERS[args.command](cfg, run)
        status = "ok" if code == EXIT_OK else "normality-gate-failed"
    except ConfigurationError as exc:
        code, status = EXIT_CONFIG, "invalid-configuration"
        extra["error"] = str(exc)
    except DivergenceError as exc:
        code, status = EXIT_DIVERGED, "diverged"
        extra["error"] = str(exc)
        extra["divergence"] = {"step": exc.step, "job": exc.job,
                               "state": _jsonable(exc.state) if exc.state is not None else None}
    except (DegenerateDataError, InsufficientDataError, IllPosedFitError) as exc:
        code, status = EXIT_NOT_NORMAL, "unusable-samples"
        extra["error"] = str(exc)
    except FileNotFoundError as exc:
        code, status = EXIT_MISSING, "missing-artifact"
        extra["error"] = f"missing file: {exc}"
    except EffPotError as exc:
        code, status = EXIT_DIVERGED, "failed"
        extra["error"] = str(exc)
    if "error" in extra:
        print(f"error: {extra['error']}", file=sys.stderr)
    run.manifest(status, code, extra)
    return code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
