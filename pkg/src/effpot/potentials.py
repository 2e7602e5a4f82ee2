"""Potential oracles and the built-in multiscale test potentials."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from . import _kernels as K
from .errors import ConfigurationError

BUILTIN_KINDS = ("quad3scale", "doublewell3scale", "cossum", "quad2d", "mullerbrown2d")

# Parameter values used in the reference experiments.
DEFAULT_PARAMS = {
    "quad3scale": {"eps1": 0.05, "eps2": 0.001},
    "doublewell3scale": {"eps1": 0.025, "eps2": 0.001},
    "cossum": {"N": 20},
    "quad2d": {"eps": 1e-5},
    "mullerbrown2d": {"eps": 1e-5},
}


class PotentialOracle:
    """A potential V on R^dim with value and gradient.

    Subclasses implement :meth:`value` and :meth:`gradient`.  Oracles that
    can be evaluated inside compiled loops additionally expose ``kernel`` as
    a ``(kind, params)`` pair; ``None`` means the Python fallback is used.
    """

    dim: int = 1
    kernel = None
    min_scale: float | None = None
    name: str = "potential"

    def value(self, q) -> float:
        raise NotImplementedError

    def gradient(self, q) -> np.ndarray:
        raise NotImplementedError

    def values(self, qs) -> np.ndarray:
        qs = np.asarray(qs, dtype=float).reshape(-1, self.dim)
        return np.array([self.value(q) for q in qs])

    def gradients(self, qs) -> np.ndarray:
        qs = np.asarray(qs, dtype=float).reshape(-1, self.dim)
        return np.array([self.gradient(q) for q in qs])

    def __call__(self, q):
        return self.value(q)


class CallablePotential(PotentialOracle):
    """Wrap user-supplied value and gradient callables."""

    def __init__(self, dim, value, gradient, name="user"):
        if int(dim) < 1:
            raise ConfigurationError("dimension must be positive", "dim")
        self.dim = int(dim)
        self._value = value
        self._gradient = gradient
        self.name = name

    def value(self, q):
        return float(self._value(np.asarray(q, dtype=float)))

    def gradient(self, q):
        g = np.asarray(self._gradient(np.asarray(q, dtype=float)), dtype=float)
        return g.reshape(self.dim)


class KernelPotential(PotentialOracle):
    """Oracle backed by a compiled kernel (built-ins and fitted potentials)."""

    def __init__(self, kind, params, dim, name="", min_scale=None, components=None):
        self.dim = int(dim)
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.kind = int(kind)
        self.kernel = (self.kind, self.params)
        self.name = name
        self.min_scale = min_scale
        self.components = dict(components or {})

    def _point(self, q):
        q = np.ascontiguousarray(q, dtype=np.float64).reshape(self.dim)
        return q

    def value(self, q):
        return float(K.value(self.kind, self.params, self._point(q)))

    def gradient(self, q):
        out = np.empty(self.dim)
        K.gradient(self.kind, self.params, self._point(q), out)
        return out

    def values(self, qs):
        qs = np.ascontiguousarray(qs, dtype=np.float64).reshape(-1, self.dim)
        return K.values(self.kind, self.params, qs)

    def gradients(self, qs):
        qs = np.ascontiguousarray(qs, dtype=np.float64).reshape(-1, self.dim)
        return K.gradients(self.kind, self.params, qs)

    def __repr__(self):
        return f"KernelPotential({self.name!r}, dim={self.dim})"


def multisine(macro, eps=(), center=0.0, name=""):
    """1D ``macro(q) + sum_j eps_j sin(q / eps_j)``.

    ``macro`` is one of ``None``, ``"quadratic"`` (q^2/2) or
    ``"doublewell"`` ((q^2-1)^2/4).
    """
    code = {None: 0, "quadratic": 1, "doublewell": 2}[macro]
    params = [code, center, len(eps), *eps]
    return KernelPotential(K.MULTISINE, params, 1, name=name,
                           min_scale=min(eps) if eps else None)


def cosine_sum(n_lo, n_hi, macro_weight=1.0, name=""):
    """1D ``w (q - pi/2)^2 / 4 + sum_{i=n_lo}^{n_hi} cos(i^2 q) / i^2``."""
    params = [macro_weight, math.pi / 2, n_lo, n_hi]
    scale = 1.0 / n_hi ** 2 if n_hi >= max(n_lo, 1) else None
    return KernelPotential(K.COSSUM, params, 1, name=name, min_scale=scale)


def quadratic(hessian, center=None, name="quadratic"):
    """``0.5 (q - c)^T H (q - c)`` in any dimension."""
    h = np.atleast_2d(np.asarray(hessian, dtype=float))
    d = h.shape[0]
    c = np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)
    params = np.concatenate([[d], h.ravel(), c])
    return KernelPotential(K.QUADRATIC, params, d, name=name)


def zero(dim=1):
    return KernelPotential(K.ZERO, [0.0], dim, name="zero")


@dataclass(frozen=True)
class BuiltinSpec:
    kind: str
    params: dict = field(default_factory=dict)

    @classmethod
    def default(cls, kind):
        """Declaration with the default parameters of ``kind``."""
        if kind not in DEFAULT_PARAMS:
            raise ConfigurationError(f"unknown built-in kind {kind!r}", "potential.kind")
        return cls(kind, dict(DEFAULT_PARAMS[kind]))


def _positive(params, key, kind):
    if key not in params:
        raise ConfigurationError(f"missing parameter {key!r} for {kind}", f"potential.params.{key}")
    try:
        val = float(params[key])
    except (TypeError, ValueError):
        raise ConfigurationError(f"parameter {key!r} must be a number", f"potential.params.{key}")
    if not (val > 0 and math.isfinite(val)):
        raise ConfigurationError(f"parameter {key!r} must be positive", f"potential.params.{key}")
    return val


def _two_scales(params, kind):
    e1 = _positive(params, "eps1", kind)
    e2 = _positive(params, "eps2", kind)
    if not e1 > e2:
        raise ConfigurationError("scales must satisfy eps1 > eps2 > 0", "potential.params")
    return e1, e2


@lru_cache(maxsize=None)
def muller_brown_center():
    """Center of the middle well of the Muller-Brown potential.

    Local minimization from (0, 0.5), polished until the gradient norm is
    below 1e-10.
    """
    def f(z):
        v, _, _ = K._muller(z[0], z[1])
        return v

    def g(z):
        _, gx, gy = K._muller(z[0], z[1])
        return np.array([gx, gy])

    res = minimize(f, np.array([0.0, 0.5]), jac=g, method="BFGS", options={"gtol": 1e-11})
    z = res.x
    # Newton polish with a finite-difference Hessian of the analytic gradient
    for _ in range(5):
        h = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = 1e-6
            h[:, j] = (g(z + e) - g(z - e)) / 2e-6
        z = z - np.linalg.solve(0.5 * (h + h.T), g(z))
    return float(z[0]), float(z[1])


def make_builtin(spec: BuiltinSpec) -> KernelPotential:
    """Build the full potential of a built-in kind.

    The returned oracle carries ``components`` (``"V0"``, ``"V1"``, ...)
    whose values sum to the full potential.
    """
    kind = spec.kind
    p = dict(spec.params)
    if kind == "quad3scale" or kind == "doublewell3scale":
        e1, e2 = _two_scales(p, kind)
        macro = "quadratic" if kind == "quad3scale" else "doublewell"
        comps = {
            "V0": multisine(macro, (), name=f"{kind}.V0"),
            "V1": multisine(None, (e1,), name=f"{kind}.V1"),
            "V2": multisine(None, (e2,), name=f"{kind}.V2"),
        }
        return _attach(multisine(macro, (e1, e2), name=kind), comps)
    if kind == "cossum":
        if "N" not in p:
            raise ConfigurationError("missing parameter 'N' for cossum", "potential.params.N")
        n = p["N"]
        if isinstance(n, bool) or not float(n).is_integer() or int(n) < 0:
            raise ConfigurationError("N must be a nonnegative integer", "potential.params.N")
        n = int(n)
        comps = {"V0": cosine_sum(1, 0, name="cossum.V0")}
        for i in range(1, n + 1):
            comps[f"V{i}"] = cosine_sum(i, i, macro_weight=0.0, name=f"cossum.V{i}")
        return _attach(cosine_sum(1, n, name=f"cossum(N={n})"), comps)
    if kind == "quad2d":
        eps = _positive(p, "eps", kind)
        comps = {
            "V0": KernelPotential(K.QUAD2D, [1.0, 0.0, eps], 2, name="quad2d.V0"),
            "V1": KernelPotential(K.QUAD2D, [0.0, 1.0, eps], 2, name="quad2d.V1", min_scale=eps),
        }
        full = KernelPotential(K.QUAD2D, [1.0, 1.0, eps], 2, name="quad2d", min_scale=eps)
        return _attach(full, comps)
    if kind == "mullerbrown2d":
        eps = _positive(p, "eps", kind)
        if "xc" in p or "yc" in p:
            xc = float(p["xc"])
            yc = float(p["yc"])
        else:
            xc, yc = muller_brown_center()
        comps = {
            "V0": KernelPotential(K.MULLER, [1.0, 0.0, eps, xc, yc], 2, name="mullerbrown2d.V0"),
            "V1": KernelPotential(K.MULLER, [0.0, 1.0, eps, xc, yc], 2,
                                  name="mullerbrown2d.V1", min_scale=eps),
        }
        full = KernelPotential(K.MULLER, [1.0, 1.0, eps, xc, yc], 2,
                               name="mullerbrown2d", min_scale=eps)
        return _attach(full, comps)
    raise ConfigurationError(f"unknown built-in kind {kind!r}", "potential.kind")


def _attach(full, comps):
    full.components = comps
    return full


def truncated_cossum(n):
    """The cosine-sum potential keeping only the first ``n`` cosine terms."""
    return make_builtin(BuiltinSpec("cossum", {"N": n}))


@dataclass
class GradientCheckReport:
    max_rel_error: float
    errors: np.ndarray
    step: float


def gradient_check(oracle: PotentialOracle, points, step=None) -> GradientCheckReport:
    """Compare the analytic gradient with central finite differences.

    The relative error at a point is ``|g - g_fd| / max(|g|, 1)``.  The
    default step is 1e-6, reduced to ``1e-3 * min_scale`` for oracles with
    a declared finer micro scale.
    """
    if step is None:
        step = 1e-6
        if oracle.min_scale is not None:
            step = min(step, 1e-3 * oracle.min_scale)
    pts = np.asarray(points, dtype=float).reshape(-1, oracle.dim)
    errs = np.empty(len(pts))
    for k, q in enumerate(pts):
        g = oracle.gradient(q)
        fd = np.empty(oracle.dim)
        for i in range(oracle.dim):
            e = np.zeros(oracle.dim)
            e[i] = step
            fd[i] = (oracle.value(q + e) - oracle.value(q - e)) / (2 * step)
        errs[k] = np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1.0)
    return GradientCheckReport(float(errs.max()) if len(errs) else 0.0, errs, step)


def local_minima_v0(oracle, starts):
    """Polish local minimizers of ``oracle`` from the given start points."""
    out = []
    for s in starts:
        res = minimize(oracle.value, np.asarray(s, float), jac=oracle.gradient,
                       method="BFGS", options={"gtol": 1e-10})
        out.append(res.x)
    return np.array(out)
