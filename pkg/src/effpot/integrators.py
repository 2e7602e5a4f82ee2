"""Dissipative Stormer-Verlet, leapfrog and kinetic Langevin stepping.

All schemes share the drift-kick-drift skeleton

    q_{n+1/2} = q_n + (delta/2) M^{-1} p_n
    p_{n+1}   = e^{-Gamma M^{-1} delta} p_n - delta grad V(q_{n+1/2})
    q_{n+1}   = q_{n+1/2} + (delta/2) M^{-1} p_{n+1}

with exactly one gradient evaluation per step.  The Langevin variant kicks
first and then applies an exact Ornstein-Uhlenbeck momentum refresh.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import _kernels as K
from .errors import ConfigurationError, DivergenceError

log = logging.getLogger(__name__)

# Bounds the memory of pre-drawn noise in long stochastic runs.
NOISE_CHUNK = 1 << 20


@dataclass
class State:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float).reshape(-1)
        self.p = np.array(self.p, dtype=float).reshape(-1)
        if self.q.shape != self.p.shape:
            raise ConfigurationError("q and p must have equal dimension", "state")

    def copy(self):
        return State(self.q.copy(), self.p.copy())


def _as_matrix(x, d, name):
    m = np.asarray(x, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(d)
    elif m.ndim == 1:
        m = np.diag(m)
    if m.shape != (d, d):
        raise ConfigurationError(f"expected a {d}x{d} matrix", name)
    return m


@dataclass
class SimConfig:
    """Step size, mass/friction matrices and run-length bookkeeping.

    ``mass`` and ``friction`` accept scalars (times identity), diagonals or
    full matrices.  ``burn_in`` defaults to 10% of ``n_steps``.
    """

    delta: float
    dim: int = 1
    mass: np.ndarray | float = 1.0
    friction: np.ndarray | float = 0.0
    n_steps: int = 0
    burn_in: int | None = None
    subsample: int = 1
    seed: int = 0

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ConfigurationError("dimension must be positive", "dim")
        self.dim = d
        self.mass = _as_matrix(self.mass, d, "mass")
        self.friction = _as_matrix(self.friction, d, "friction")
        self.n_steps = int(self.n_steps)
        if self.burn_in is None:
            self.burn_in = self.n_steps // 10
        self.burn_in = int(self.burn_in)
        self.subsample = int(self.subsample)
        self.validate()

    def validate(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ConfigurationError("step size must be positive", "delta")
        if not np.allclose(self.mass, self.mass.T):
            raise ConfigurationError("mass matrix must be symmetric", "mass")
        if np.linalg.eigvalsh(self.mass).min() <= 0:
            raise ConfigurationError("mass matrix must be positive definite", "mass")
        if not np.allclose(self.friction, self.friction.T):
            raise ConfigurationError("friction matrix must be symmetric", "friction")
        scale = max(1.0, np.abs(self.friction).max())
        if np.linalg.eigvalsh(self.friction).min() < -1e-12 * scale:
            raise ConfigurationError("friction matrix must be positive semidefinite", "friction")
        if self.n_steps < 0:
            raise ConfigurationError("must be nonnegative", "n_steps")
        if self.n_steps > 0 and not (0 <= self.burn_in < self.n_steps):
            raise ConfigurationError("must satisfy 0 <= burn_in < n_steps", "burn_in")
        if self.subsample < 1:
            raise ConfigurationError("must be at least 1", "subsample")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class PrecomputedStep:
    half_mass_inv_delta: np.ndarray
    damp_factor: np.ndarray
    mass_inv: np.ndarray


def damping_matrix(friction, mass_inv, delta):
    """``exp(-friction @ mass_inv * delta)``.

    Uses a symmetric eigendecomposition when the product is symmetric and
    dense scaling-and-squaring otherwise.
    """
    a = friction @ mass_inv
    if not np.any(a):
        return np.eye(a.shape[0])
    if np.allclose(a, a.T, rtol=1e-13, atol=1e-15):
        w, v = np.linalg.eigh(0.5 * (a + a.T))
        return (v * np.exp(-w * delta)) @ v.T
    return expm(-a * delta)


def precompute(config: SimConfig) -> PrecomputedStep:
    config.validate()
    minv = np.linalg.inv(config.mass)
    minv = 0.5 * (minv + minv.T)
    return PrecomputedStep(0.5 * config.delta * minv,
                           damping_matrix(config.friction, minv, config.delta), minv)


def _grad(oracle, q, step):
    g = np.asarray(oracle.gradient(q), dtype=float)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient at step {step}", step=step)
    return g


def verlet_step(state: State, oracle, pre: PrecomputedStep, config: SimConfig,
                step_index=0) -> State:
    """One dissipative Stormer-Verlet step (pure Python)."""
    q_half = state.q + pre.half_mass_inv_delta @ state.p
    g = _grad(oracle, q_half, step_index)
    p = pre.damp_factor @ state.p - config.delta * g
    q = q_half + pre.half_mass_inv_delta @ p
    return State(q, p)


def hamiltonian_step(state: State, oracle, config: SimConfig) -> State:
    """Symplectic leapfrog: :func:`verlet_step` with zero friction."""
    minv = np.linalg.inv(config.mass)
    pre = PrecomputedStep(0.5 * config.delta * minv, np.eye(config.dim), minv)
    return verlet_step(state, oracle, pre, config)


def ou_noise_factor(config: SimConfig, beta=1.0, damp=None):
    """Square root of the exact OU refresh covariance (M - D M D^T) / beta."""
    if beta <= 0:
        raise ConfigurationError("inverse temperature must be positive", "beta")
    minv = np.linalg.inv(config.mass)
    if damp is None:
        damp = damping_matrix(config.friction, minv, config.delta)
    cov = (config.mass - damp @ config.mass @ damp.T) / beta
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def langevin_step(state: State, oracle, config: SimConfig, rng, beta=1.0) -> State:
    """Half drift, kick, exact OU momentum refresh, half drift."""
    config.validate()
    minv = np.linalg.inv(config.mass)
    half = 0.5 * config.delta * minv
    q = state.q + half @ state.p
    g = _grad(oracle, q, 0)
    p = state.p - config.delta * g
    if np.any(config.friction):
        damp = damping_matrix(config.friction, minv, config.delta)
        p = damp @ p + ou_noise_factor(config, beta, damp) @ rng.standard_normal(config.dim)
    return State(q + half @ p, p)


# --------------------------------------------------------------------------
# long runs
# --------------------------------------------------------------------------


@dataclass
class SampleSet:
    """Equilibrium samples kept from a long trajectory."""

    qs: np.ndarray
    ps: np.ndarray
    delta: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.qs = np.asarray(self.qs, dtype=float)
        self.ps = np.asarray(self.ps, dtype=float)
        if self.qs.ndim == 1:
            self.qs = self.qs[:, None]
        if self.ps.ndim == 1:
            self.ps = self.ps[:, None]
        if self.qs.shape != self.ps.shape:
            raise ConfigurationError("qs and ps must have the same shape", "samples")

    @property
    def dim(self):
        return self.qs.shape[1]

    def __len__(self):
        return self.qs.shape[0]


def _run(oracle, q, p, minv, damp, delta, n_steps, chol, damp_kick, rng,
         phase, stride, out_q, out_p, n_out, step_offset):
    """Drive the compiled loop (or the Python fallback) over ``n_steps``."""
    d = q.shape[0]
    noisy = chol is not None and np.any(chol)
    chol_arr = chol if noisy else np.zeros((d, d))
    done = 0
    evals = 0
    while done < n_steps:
        n = n_steps - done
        if noisy:
            n = min(n, NOISE_CHUNK)
            noise = rng.standard_normal((n, d))
        else:
            noise = np.empty((0, d))
        if oracle.kernel is not None:
            kind, params = oracle.kernel
            status, k, n_out, ev = K.run_chunk(kind, params, q, p, minv, damp, delta, n,
                                               noise, chol_arr, damp_kick, phase + done,
                                               stride, out_q, out_p, n_out)
        else:
            status, k, n_out, ev = _run_python(oracle, q, p, minv, damp, delta, n, noise,
                                               chol_arr, damp_kick, phase + done, stride,
                                               out_q, out_p, n_out)
        evals += ev
        if status != K.STATUS_OK:
            step = step_offset + done + k
            raise DivergenceError(f"trajectory diverged at step {step}", step=step,
                                  state=State(q.copy(), p.copy()))
        done += n
    return n_out, evals


def _run_python(oracle, q, p, minv, damp, delta, n_steps, noise, chol, damp_kick,
                phase, stride, out_q, out_p, n_out):
    half = 0.5 * delta
    cap = out_q.shape[0]
    for n in range(n_steps):
        q_prev, p_prev = q.copy(), p.copy()
        q += half * (minv @ p)
        g = np.asarray(oracle.gradient(q.copy()), dtype=float)
        if damp_kick:
            new_p = damp @ (p - delta * g)
        else:
            new_p = damp @ p - delta * g
        if noise.shape[0]:
            new_p += chol @ noise[n]
        p[:] = new_p
        q += half * (minv @ p)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))) or np.abs(q).max() > K.Q_LIMIT:
            q[:], p[:] = q_prev, p_prev
            return K.STATUS_DIVERGED, n, n_out, n + 1
        if (phase + n + 1) % stride == 0 and n_out < cap:
            out_q[n_out] = q
            out_p[n_out] = p
            n_out += 1
    return K.STATUS_OK, n_steps, n_out, n_steps


def simulate_damped(oracle, config: SimConfig, init: State, noise_cov=None,
                    rng=None) -> SampleSet:
    """Iterate the dissipative Verlet scheme and keep post-burn-in samples.

    With ``noise_cov`` (a d x d matrix Z) the kick additionally receives
    ``sqrt(delta) * Sigma * xi`` with ``Sigma Sigma^T = Z``, i.e. an explicit
    stochastic Langevin system with known diffusion.  ``rng`` defaults to a
    generator seeded from ``config.seed``.

    Raises :class:`DivergenceError` carrying the step index and the last
    finite state when the trajectory blows up.
    """
    pre = precompute(config)
    if init.q.shape[0] != oracle.dim or config.dim != oracle.dim:
        raise ConfigurationError("state, config and oracle dimensions differ", "init")
    chol = None
    if noise_cov is not None:
        z = _as_matrix(noise_cov, oracle.dim, "noise_cov")
        w, v = np.linalg.eigh(0.5 * (z + z.T))
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ConfigurationError("noise covariance must be positive semidefinite", "noise_cov")
        chol = np.sqrt(config.delta) * (v * np.sqrt(np.clip(w, 0, None))) @ v.T
        if rng is None:
            rng = np.random.default_rng(config.seed)
    return _simulate(oracle, config, init, pre.mass_inv, pre.damp_factor, chol,
                     False, rng)


def simulate_langevin(oracle, config: SimConfig, init: State, beta=1.0, rng=None) -> SampleSet:
    """Long single-trajectory run of the Langevin splitting (see langevin_step)."""
    pre = precompute(config)
    chol = ou_noise_factor(config, beta, pre.damp_factor)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return _simulate(oracle, config, init, pre.mass_inv, pre.damp_factor, chol, True, rng)


def _simulate(oracle, config, init, minv, damp, chol, damp_kick, rng):
    d = oracle.dim
    q = np.ascontiguousarray(init.q, dtype=np.float64).copy()
    p = np.ascontiguousarray(init.p, dtype=np.float64).copy()
    minv = np.ascontiguousarray(minv)
    damp = np.ascontiguousarray(damp)
    n_keep = (config.n_steps - config.burn_in) // config.subsample
    out_q = np.empty((n_keep, d))
    out_p = np.empty((n_keep, d))
    dummy = np.empty((0, d))
    _, ev1 = _run(oracle, q, p, minv, damp, config.delta, config.burn_in, chol, damp_kick,
                  rng, 0, 1, dummy, dummy, 0, 0)
    n_out, ev2 = _run(oracle, q, p, minv, damp, config.delta,
                      config.n_steps - config.burn_in, chol, damp_kick, rng, 0,
                      config.subsample, out_q, out_p, 0, config.burn_in)
    meta = {
        "n_steps": config.n_steps,
        "burn_in": config.burn_in,
        "subsample": config.subsample,
        "seed": config.seed,
        "diverged": False,
        "grad_evals": ev1 + ev2,
        "final_state": State(q.copy(), p.copy()),
    }
    return SampleSet(out_q[:n_out], out_p[:n_out], config.delta, meta)
