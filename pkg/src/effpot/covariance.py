"""Effective noise covariance from mass-matrix probing, and friction calibration.

For Langevin dynamics ``dp = (-grad V - gamma M^{-1} p) dt + Sigma dW`` with
``Z = Sigma Sigma^T`` constant, Ito's formula applied to the energy gives at
equilibrium

    Tr(Z M^{-1}) = 2 gamma E[p^T M^{-2} p].

Running the damped large-step scheme with several inverse masses
``A = M^{-1}`` therefore yields linear equations for the entries of Z.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ._parallel import child_rng, pmap
from .errors import ConfigurationError, ContractError, DivergenceError, EffPotError
from .integrators import SimConfig, State, simulate_damped

log = logging.getLogger(__name__)

N_BATCHES = 100
# cap on stored samples per probe run; the estimator only needs a mean
MAX_STORED = 2_000_000


@dataclass
class ProbePlan:
    probes: list
    gamma: float

    def __post_init__(self):
        self.probes = [np.asarray(a, dtype=float) for a in self.probes]
        if not self.probes:
            raise ConfigurationError("a probe plan needs at least one probe", "probes")
        d = self.dim
        if len(self.probes) != d * (d + 1) // 2:
            raise ConfigurationError(f"expected {d * (d + 1) // 2} probes for d={d}", "probes")
        for k, a in enumerate(self.probes):
            if a.shape != (d, d) or not np.allclose(a, a.T):
                raise ConfigurationError(f"probe {k} is not a symmetric {d}x{d} matrix", "probes")
            if np.linalg.eigvalsh(a).min() <= 0:
                raise ConfigurationError(f"probe {k} is not positive definite", "probes")
        if np.linalg.matrix_rank(self.diagonal_design) < d:
            raise ConfigurationError("diagonal probes are linearly dependent", "probes")

    @property
    def dim(self):
        return self.probes[0].shape[0]

    @property
    def diagonal_design(self):
        """Rows are the diagonals of the first ``d`` probes."""
        return np.array([np.diag(a) for a in self.probes[: self.dim]])

    @property
    def pairs(self):
        d = self.dim
        return [(l, r) for l in range(d) for r in range(l + 1, d)]

    def describe(self):
        return {"gamma": self.gamma, "probes": [a.tolist() for a in self.probes]}


def build_probe_plan(d, gamma=0.1, scale=1.0) -> ProbePlan:
    """Inverse-mass probes: ``I + e_k e_k^T`` per coordinate, then one probe
    per pair (l, r) equal to the identity with the (l, r) entries at 1/2.

    ``scale`` multiplies every probe; values below 1 shorten the effective
    step ``delta * sqrt(A)`` for stiff potentials without changing the
    linear system's structure.
    """
    if isinstance(d, bool) or int(d) != d or d < 1:
        raise ConfigurationError("dimension must be a positive integer", "d")
    if not gamma > 0:
        raise ConfigurationError("probing friction must be positive", "gamma")
    if not (scale > 0 and np.isfinite(scale)):
        raise ConfigurationError("probe scale must be positive", "probe_scale")
    d = int(d)
    if d == 1:
        return ProbePlan([scale * np.eye(1)], float(gamma))
    probes = []
    for k in range(d):
        a = np.eye(d)
        a[k, k] = 2.0
        probes.append(a)
    for l in range(d):
        for r in range(l + 1, d):
            a = np.eye(d)
            a[l, r] = a[r, l] = 0.5
            probes.append(a)
    return ProbePlan([scale * a for a in probes], float(gamma))


def analytic_rhs(plan: ProbePlan, z):
    """``Tr(Z A)`` for every probe: the right-hand sides an exact
    measurement would return."""
    z = np.asarray(z, dtype=float)
    return np.array([np.trace(z @ a) for a in plan.probes])


@dataclass
class CovarianceEstimate:
    z: np.ndarray
    rhs: np.ndarray
    stderr: np.ndarray
    projected: bool = False
    projection_norm: float = 0.0
    plan: ProbePlan | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.z.shape[0]

    @property
    def friction(self):
        return friction_from_covariance(self)

    def to_dict(self):
        out = {
            "z": self.z.tolist(),
            "rhs": [float(x) for x in self.rhs],
            "stderr": [float(x) for x in self.stderr],
            "projected": bool(self.projected),
            "projection_norm": float(self.projection_norm),
            "plan": self.plan.describe() if self.plan is not None else None,
            "friction": friction_from_covariance(self).tolist(),
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, data):
        plan = None
        if data.get("plan"):
            plan = ProbePlan(data["plan"]["probes"], data["plan"]["gamma"])
        return cls(np.asarray(data["z"], dtype=float), np.asarray(data["rhs"], dtype=float),
                   np.asarray(data["stderr"], dtype=float), bool(data.get("projected", False)),
                   float(data.get("projection_norm", 0.0)), plan, dict(data.get("meta", {})))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def solve_covariance(plan: ProbePlan, rhs, stderr=None) -> CovarianceEstimate:
    """Recover Z from ``rhs[k] = Tr(Z A_k)``.

    Diagonal entries come from the ``d`` diagonal probes; each off-diagonal
    entry is its pair probe's value minus the trace part.  The result is
    symmetrized and, if Monte Carlo noise left negative eigenvalues, clipped
    to the nearest PSD matrix (``projected`` is then set).
    """
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if rhs.shape[0] != len(plan.probes):
        raise ContractError(f"expected {len(plan.probes)} right-hand sides, got {rhs.shape[0]}")
    stderr = np.zeros_like(rhs) if stderr is None else np.asarray(stderr, dtype=float)
    d = plan.dim
    design = plan.diagonal_design
    if abs(np.linalg.det(design)) < 1e-12:
        raise EffPotError("diagonal probe design is singular")
    diag = np.linalg.solve(design, rhs[:d])
    z = np.diag(diag)
    for k, (l, r) in enumerate(plan.pairs):
        a = plan.probes[d + k]
        # Tr(Z A) = sum_i a_ii z_ii + 2 a_lr z_lr with a_lr = 1/2
        off = (rhs[d + k] - np.dot(np.diag(a), diag)) / (2.0 * a[l, r])
        z[l, r] = z[r, l] = off
    z = 0.5 * (z + z.T)
    w, v = np.linalg.eigh(z)
    projected = bool(w.min() < 0)
    correction = 0.0
    if projected:
        fixed = (v * np.clip(w, 0, None)) @ v.T
        correction = float(np.linalg.norm(fixed - z))
        z = 0.5 * (fixed + fixed.T)
        log.warning("covariance estimate projected to PSD (correction %.3g)", correction)
    return CovarianceEstimate(z, rhs, stderr, projected, correction, plan)


def friction_from_covariance(z) -> np.ndarray:
    """Friction matrix ``Z / 2`` restoring a unit-temperature Gibbs state."""
    m = z.z if isinstance(z, CovarianceEstimate) else np.asarray(z, dtype=float)
    m = 0.5 * (m + m.T)
    return 0.5 * m


def batch_means_stderr(x, n_batches=N_BATCHES):
    x = np.asarray(x, dtype=float)
    n = (len(x) // n_batches) * n_batches
    if n == 0:
        return float("nan")
    means = x[:n].reshape(n_batches, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def measure_rhs(oracle, probe, gamma, delta, n_steps, seed=0, init=None, burn_in=None,
                subsample=None, noise_cov=None, probe_index=None):
    """``2 gamma E[p^T A^2 p]`` from one damped run with inverse mass ``A``.

    Returns ``(rhs, stderr)`` with a 100-batch-means standard error.
    ``noise_cov`` injects explicit noise of known covariance per unit time
    (the synthetic check of the identity).
    """
    a = np.asarray(probe, dtype=float)
    d = a.shape[0]
    if subsample is None:
        subsample = max(1, int(np.ceil(int(n_steps) / MAX_STORED)))
    cfg = SimConfig(delta=delta, dim=d, mass=np.linalg.inv(a), friction=gamma,
                    n_steps=int(n_steps), burn_in=burn_in, subsample=subsample, seed=seed)
    if init is None:
        init = State(np.zeros(d), np.zeros(d) if noise_cov is not None else np.ones(d))
    rng = child_rng(seed, probe_index or 0) if noise_cov is not None else None
    try:
        samples = simulate_damped(oracle, cfg, init, noise_cov=noise_cov, rng=rng)
    except DivergenceError as exc:
        exc.job = probe_index
        raise DivergenceError(f"probe {probe_index}: {exc}", exc.step, exc.state, probe_index)
    a2 = a @ a
    x = np.einsum("ni,ij,nj->n", samples.ps, a2, samples.ps)
    return 2.0 * gamma * float(x.mean()), 2.0 * gamma * batch_means_stderr(x)


def _probe_job(args):
    oracle, probe, k, kw = args
    return measure_rhs(oracle, probe, probe_index=k, **kw)


def estimate_covariance(oracle, plan: ProbePlan, delta, n_steps, seed=0, init=None,
                        burn_in=None, subsample=None, noise_cov=None, jobs=None) -> CovarianceEstimate:
    """Run every probe of ``plan`` (in parallel when ``jobs`` > 1) and solve for Z."""
    kw = dict(gamma=plan.gamma, delta=delta, n_steps=n_steps, seed=seed, init=init,
              burn_in=burn_in, subsample=subsample, noise_cov=noise_cov)
    results = pmap(_probe_job, [(oracle, a, k, kw) for k, a in enumerate(plan.probes)], jobs)
    rhs = np.array([r[0] for r in results])
    err = np.array([r[1] for r in results])
    est = solve_covariance(plan, rhs, err)
    est.meta.update({"delta": float(delta), "n_steps": int(n_steps), "seed": int(seed)})
    return est


def quadrature_covariance(micro, delta, box, n_points=1 << 18, seed=0):
    """``delta * E_u[grad V1(u) grad V1(u)^T]`` for ``u`` uniform on ``box``.

    ``micro`` is the oracle of the under-resolved component(s); ``box`` is a
    list of per-dimension ``(lo, hi)``.  Scrambled Sobol points keep the
    estimate deterministic for a fixed seed.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    d = box.shape[0]
    m = int(np.log2(n_points))
    u = qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)
    pts = box[:, 0] + u * (box[:, 1] - box[:, 0])
    g = micro.gradients(pts)
    return float(delta) * (g.T @ g) / g.shape[0]
