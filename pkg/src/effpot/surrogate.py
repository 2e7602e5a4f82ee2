"""Surrogate ensembles and the statistics used to compare them.

Ensembles of Hamiltonian or kinetic-Langevin trajectories are driven by any
oracle (usually a fitted potential).  Each trajectory owns a random stream
derived from ``(seed, index)``, so results do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._parallel import child_rng, pmap
from .equilibrium import FittedPotential, Histogram, histogram_density
from .errors import ConfigurationError, ContractError, DegenerateDataError, DivergenceError
from .integrators import SimConfig, _as_matrix, damping_matrix, ou_noise_factor, _run_python

log = logging.getLogger(__name__)

MODES = ("hamiltonian", "langevin")


@dataclass(frozen=True)
class Distribution:
    """Per-coordinate initial law: ``normal(loc, scale)`` or
    ``uniform(low, high)``, plus ``shift``."""

    kind: str = "normal"
    loc: float = 0.0
    scale: float = 1.0
    low: float = 0.0
    high: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "point"):
            raise ConfigurationError(f"unknown distribution {self.kind!r}", "init.kind")
        if self.kind == "normal" and not self.scale >= 0:
            raise ConfigurationError("scale must be nonnegative", "init.scale")
        if self.kind == "uniform" and not self.high > self.low:
            raise ConfigurationError("need low < high", "init.high")

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, cls):
            return data
        return cls(**data)

    def to_dict(self):
        if self.kind == "normal":
            return {"kind": "normal", "loc": self.loc, "scale": self.scale, "shift": self.shift}
        if self.kind == "uniform":
            return {"kind": "uniform", "low": self.low, "high": self.high, "shift": self.shift}
        return {"kind": "point", "loc": self.loc}

    def sample(self, rng, d):
        if self.kind == "normal":
            return self.loc + self.scale * rng.standard_normal(d) + self.shift
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, d) + self.shift
        return np.full(d, self.loc, dtype=float)


@dataclass
class EnsembleConfig:
    """M trajectories on [0, horizon] with step ``step``.

    States are stored every ``store_dt`` time units (default: every step).
    ``noise_step`` sets the resolution of the driving Brownian path: each
    Langevin step consumes ``step / noise_step`` standard normals per
    coordinate, summed and rescaled.  Runs at different steps with the same
    ``noise_step`` and seed therefore see the same Brownian path.
    """

    n_traj: int
    horizon: float
    step: float
    init_q: Distribution = field(default_factory=Distribution)
    init_p: Distribution = field(default_factory=Distribution)
    seed: int = 0
    store_dt: float | None = None
    noise_step: float | None = None

    def __post_init__(self):
        self.init_q = Distribution.from_dict(self.init_q)
        self.init_p = Distribution.from_dict(self.init_p)
        if int(self.n_traj) < 1:
            raise ConfigurationError("must be at least 1", "n_traj")
        self.n_traj = int(self.n_traj)
        if not self.horizon > 0:
            raise ConfigurationError("must be positive", "horizon")
        if not self.step > 0:
            raise ConfigurationError("must be positive", "step")
        if int(self.seed) < 0:
            raise ConfigurationError("must be nonnegative", "seed")
        self.n_steps  # validates divisibility
        self.stride
        self.substeps

    @staticmethod
    def _ratio(a, b, name):
        r = a / b
        k = int(round(r))
        if k < 1 or abs(r - k) > 1e-6 * max(1.0, r):
            raise ConfigurationError(f"must be an integer multiple of the step", name)
        return k

    @property
    def n_steps(self):
        return self._ratio(self.horizon, self.step, "horizon")

    @property
    def stride(self):
        return 1 if self.store_dt is None else self._ratio(self.store_dt, self.step, "store_dt")

    @property
    def substeps(self):
        if self.noise_step is None:
            return 1
        return self._ratio(self.step, self.noise_step, "noise_step")

    @property
    def times(self):
        n = self.n_steps // self.stride
        return np.arange(n + 1) * self.stride * self.step


@dataclass
class Ensemble:
    t: np.ndarray
    qs: np.ndarray  # (M, n_t, d)
    ps: np.ndarray
    excluded: np.ndarray  # (M,) bool
    mode: str
    meta: dict = field(default_factory=dict)

    @property
    def n_excluded(self):
        return int(self.excluded.sum())

    def kept(self):
        return self.qs[~self.excluded]


def _trajectory_block(args):
    (kernel, oracle, mode, cfg, indices, minv, damp, chol, dim, bounds) = args
    nt = len(cfg.times)
    out_q = np.empty((len(indices), nt, dim))
    out_p = np.empty((len(indices), nt, dim))
    flags = np.zeros(len(indices), dtype=bool)
    n = cfg.n_steps
    k = cfg.substeps
    noisy = mode == "langevin" and np.any(chol)
    for row, idx in enumerate(indices):
        rng = child_rng(cfg.seed, idx)
        q = np.ascontiguousarray(cfg.init_q.sample(rng, dim))
        p = np.ascontiguousarray(cfg.init_p.sample(rng, dim))
        out_q[row, 0] = q
        out_p[row, 0] = p
        if noisy:
            z = rng.standard_normal((n * k, dim))
            if k > 1:
                z = z.reshape(n, k, dim).sum(axis=1) / math.sqrt(k)
            noise = np.ascontiguousarray(z)
        else:
            noise = np.empty((0, dim))
        chol_arr = chol if noisy else np.zeros((dim, dim))
        oq = out_q[row, 1:]
        op = out_p[row, 1:]
        if kernel is not None:
            status, done, _, _ = K.run_chunk(kernel[0], kernel[1], q, p, minv, damp, cfg.step, n,
                                             noise, chol_arr, mode == "langevin", 0, cfg.stride,
                                             oq, op, 0)
        else:
            status, done, _, _ = _run_python(oracle, q, p, minv, damp, cfg.step, n, noise,
                                             chol_arr, mode == "langevin", 0, cfg.stride, oq, op, 0)
        if status != K.STATUS_OK:
            raise DivergenceError(f"trajectory {idx} diverged at step {done}", done, None, idx)
        if bounds is not None:
            lo, hi = bounds
            traj = out_q[row]
            flags[row] = bool(np.any(traj < lo) or np.any(traj > hi))
    return out_q, out_p, flags


def run_ensemble(potential, mode, config: EnsembleConfig, friction=0.0, beta=1.0, mass=1.0,
                 jobs=None, domain_margin=0.25) -> Ensemble:
    """Integrate ``config.n_traj`` independent trajectories.

    ``hamiltonian`` uses leapfrog and ignores friction and temperature;
    ``langevin`` uses kick + exact OU refresh at inverse temperature
    ``beta``.  For fitted potentials, trajectories leaving the fitted domain
    by more than ``domain_margin`` times its width are flagged and excluded
    from statistics.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}", "mode")
    dim = potential.dim
    sim = SimConfig(delta=config.step, dim=dim, mass=mass,
                    friction=friction if mode == "langevin" else 0.0)
    minv = np.linalg.inv(sim.mass)
    minv = np.ascontiguousarray(0.5 * (minv + minv.T))
    if mode == "langevin":
        if not beta > 0:
            raise ConfigurationError("inverse temperature must be positive", "beta")
        damp = damping_matrix(sim.friction, minv, sim.delta)
        chol = ou_noise_factor(sim, beta, damp)
    else:
        damp = np.eye(dim)
        chol = np.zeros((dim, dim))
    bounds = None
    if isinstance(potential, FittedPotential) and domain_margin is not None:
        dom = np.array(potential.domain)
        w = dom[:, 1] - dom[:, 0]
        bounds = (dom[:, 0] - domain_margin * w, dom[:, 1] + domain_margin * w)
    m = config.n_traj
    n_blocks = max(1, min(m, 4 * max(1, int(jobs or 1))))
    blocks = [b.tolist() for b in np.array_split(np.arange(m), n_blocks) if len(b)]
    kernel = potential.kernel
    oracle = None if kernel is not None else potential
    args = [(kernel, oracle, mode, config, b, minv, np.ascontiguousarray(damp),
             np.ascontiguousarray(chol), dim, bounds) for b in blocks]
    parts = pmap(_trajectory_block, args, jobs)
    qs = np.concatenate([p[0] for p in parts])
    ps = np.concatenate([p[1] for p in parts])
    excluded = np.concatenate([p[2] for p in parts])
    if excluded.any():
        log.warning("%d of %d trajectories left the fitted domain", excluded.sum(), m)
    meta = {"n_traj": m, "step": config.step, "horizon": config.horizon, "seed": config.seed,
            "mode": mode, "beta": float(beta), "excluded": int(excluded.sum())}
    return Ensemble(config.times, qs, ps, excluded, mode, meta)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def _as_trajectories(trajectories):
    if isinstance(trajectories, Ensemble):
        return trajectories.kept()
    if isinstance(trajectories, np.ndarray):
        x = trajectories
    else:
        lengths = {len(np.asarray(t)) for t in trajectories}
        if len(lengths) > 1:
            raise ContractError("trajectories have different lengths")
        x = np.array([np.asarray(t, dtype=float) for t in trajectories])
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ContractError("expected trajectories shaped (M, n_t) or (M, n_t, d)")
    return x


def mean_trajectory(trajectories) -> np.ndarray:
    """Ensemble average at every stored time, shape (n_t, d)."""
    x = _as_trajectories(trajectories)
    if x.shape[0] == 0:
        raise ContractError("no trajectories")
    # offset from the first member keeps identical ensembles exact
    return x[0] + (x - x[0]).mean(axis=0)


def normalized_acf(trajectories, max_lag) -> np.ndarray:
    """Normalized autocorrelation over time and ensemble, shape (max_lag+1, d).

    For lag ``k`` the pairs ``(q_n, q_{n+k})`` with ``n < N - k`` of every
    trajectory enter; the covariance in the denominator uses all times.
    """
    x = _as_trajectories(trajectories)
    m, n, d = x.shape
    max_lag = int(max_lag)
    if not 0 <= max_lag < n:
        raise ContractError(f"max_lag must lie in [0, {n - 1}]")
    mean = x.mean(axis=(0, 1))
    c = x - mean
    cov = np.mean(c * c, axis=(0, 1))
    if np.any(cov <= 0):
        raise DegenerateDataError("zero covariance; autocorrelation undefined")
    out = np.empty((max_lag + 1, d))
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        head = x[:, : n - k]
        tail = x[:, k:]
        h = head - head.mean(axis=(0, 1))
        t = tail - tail.mean(axis=(0, 1))
        out[k] = np.mean(h * t, axis=(0, 1)) / cov
    return out


@dataclass
class DiagnosticsReport:
    t: np.ndarray
    mean_path: np.ndarray
    lags: np.ndarray
    acf: np.ndarray
    equilibrium_hist: Histogram
    phase_portrait: np.ndarray | None = None
    n_used: int = 0
    n_excluded: int = 0

    def to_dict(self):
        h = self.equilibrium_hist
        return {
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "t": self.t.tolist(),
            "mean_path": self.mean_path.tolist(),
            "lags": self.lags.tolist(),
            "acf": self.acf.tolist(),
            "equilibrium": {"edges": [e.tolist() for e in h.edges],
                            "density": h.density.tolist()},
        }


def diagnose(ensemble: Ensemble, max_lag=None, late_fraction=0.5, bins=50,
             hist_range=None) -> DiagnosticsReport:
    """Mean path, normalized ACF, late-time histogram and phase portrait.

    The histogram pools every kept trajectory at times ``t >= late_fraction
    * T``; ``max_lag`` defaults to half the stored grid.
    """
    x = ensemble.kept()
    if x.shape[0] == 0:
        raise DegenerateDataError("every trajectory was excluded")
    n = x.shape[1]
    if max_lag is None:
        max_lag = (n - 1) // 2
    dt = ensemble.t[1] - ensemble.t[0] if n > 1 else 0.0
    mp = mean_trajectory(x)
    acf = normalized_acf(x, max_lag)
    start = int(np.searchsorted(ensemble.t, late_fraction * ensemble.t[-1]))
    late = x[:, start:].reshape(-1, x.shape[2])
    hist = histogram_density(late, bins=bins, range=hist_range)
    phase = None
    if ensemble.mode == "hamiltonian":
        phase = np.column_stack([ensemble.qs[0], ensemble.ps[0]])
    return DiagnosticsReport(ensemble.t.copy(), mp, np.arange(max_lag + 1) * dt, acf, hist,
                             phase, int(x.shape[0]), ensemble.n_excluded)


def _on_grid(t_src, y_src, t_dst):
    return np.column_stack([np.interp(t_dst, t_src, y_src[:, j]) for j in range(y_src.shape[1])])


def _bin_masses(hist: Histogram, edges):
    """Mass of a 1D histogram redistributed onto ``edges`` (uniform within bins)."""
    src = hist.edges[0]
    mass = hist.counts / max(hist.counts.sum(), 1)
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    return np.diff(np.interp(edges, src, cdf, left=0.0, right=1.0))


def total_variation(a: Histogram, b: Histogram):
    """TV distance of two histograms; differing 1D binnings are merged."""
    if len(a.edges) == len(b.edges) and all(
            ea.shape == eb.shape and np.allclose(ea, eb) for ea, eb in zip(a.edges, b.edges)):
        pa = a.counts / max(a.counts.sum(), 1)
        pb = b.counts / max(b.counts.sum(), 1)
        return 0.5 * float(np.abs(pa - pb).sum())
    if a.dim != 1 or b.dim != 1:
        raise ContractError("multi-dimensional histograms must share their binning")
    edges = np.union1d(a.edges[0], b.edges[0])
    return 0.5 * float(np.abs(_bin_masses(a, edges) - _bin_masses(b, edges)).sum())


def compare_reports(a: DiagnosticsReport, b: DiagnosticsReport) -> dict:
    """Discrepancies of ``b`` relative to ``a``.

    Mean path and ACF are compared on ``a``'s grids (``b`` is linearly
    interpolated when grids differ, restricted to the common range).  L2 is
    the root mean square over grid points; TV uses a common binning.
    """
    warn = []
    t = a.t[(a.t >= b.t[0]) & (a.t <= b.t[-1])]
    ma = _on_grid(a.t, a.mean_path, t)
    mb = _on_grid(b.t, b.mean_path, t)
    lags = a.lags[(a.lags >= b.lags[0]) & (a.lags <= b.lags[-1])]
    ca = _on_grid(a.lags, a.acf, lags)
    cb = _on_grid(b.lags, b.acf, lags)
    ea = a.equilibrium_hist.edges
    eb = b.equilibrium_hist.edges
    disjoint = any(x[-1] <= y[0] or y[-1] <= x[0] for x, y in zip(ea, eb))
    if disjoint:
        tv = 1.0
        msg = "equilibrium histograms have disjoint support"
        warnings.warn(msg)
        warn.append(msg)
    else:
        tv = total_variation(a.equilibrium_hist, b.equilibrium_hist)
    dm = mb - ma
    dc = cb - ca
    return {
        "mean_path_linf": float(np.abs(dm).max()) if dm.size else 0.0,
        "mean_path_l2": float(np.sqrt(np.mean(dm ** 2))) if dm.size else 0.0,
        "acf_linf": float(np.abs(dc).max()) if dc.size else 0.0,
        "acf_l2": float(np.sqrt(np.mean(dc ** 2))) if dc.size else 0.0,
        "equilibrium_tv": float(tv),
        "warnings": warn,
    }
