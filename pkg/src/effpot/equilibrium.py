"""From equilibrium samples to an effective potential.

Normality gate on momenta, inverse-temperature estimate, empirical density
of positions and log-density regression onto a spline basis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import make_lsq_spline
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import spsolve
from scipy.stats import jarque_bera

from . import _kernels as K
from .errors import DegenerateDataError, IllPosedFitError, InsufficientDataError
from .integrators import SampleSet
from .potentials import KernelPotential

log = logging.getLogger(__name__)

BETA_RANGE = (0.2, 1.25)
COUNT_FLOOR = 5


# --------------------------------------------------------------------------
# normality gate and temperature
# --------------------------------------------------------------------------


@dataclass
class NormalityReport:
    per_dim_stat: np.ndarray
    per_dim_p: np.ndarray
    cross_corr_max: float
    threshold: float
    n_points: int
    stride: int

    @property
    def passed(self) -> bool:
        return bool(np.all(self.per_dim_p >= self.threshold))

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "threshold": self.threshold,
            "jarque_bera": [float(x) for x in self.per_dim_stat],
            "p_values": [float(x) for x in self.per_dim_p],
            "cross_corr_max": float(self.cross_corr_max),
            "n_points": int(self.n_points),
            "stride": int(self.stride),
        }


def _momenta(samples):
    if isinstance(samples, SampleSet):
        return samples.ps
    p = np.asarray(samples, dtype=float)
    return p[:, None] if p.ndim == 1 else p


def normality_test(samples, threshold=0.01, max_points=5000, min_points=1000) -> NormalityReport:
    """Jarque-Bera test of each momentum coordinate on a thinned subsample.

    The trajectory is thinned to at most ``max_points`` evenly strided
    points.  The verdict only looks at the per-coordinate p-values;
    correlations between coordinates are reported but never fail the gate.
    """
    p = _momenta(samples)
    n = p.shape[0]
    if n < min_points:
        raise InsufficientDataError(f"need at least {min_points} momentum samples, got {n}")
    stride = max(1, math.ceil(n / max_points))
    sub = p[::stride]
    d = p.shape[1]
    stats = np.empty(d)
    pvals = np.empty(d)
    for i in range(d):
        x = sub[:, i]
        if not np.all(np.isfinite(x)) or np.ptp(x) <= 1e-300 or x.std() <= 1e-12 * max(1.0, abs(x.mean())):
            stats[i], pvals[i] = np.inf, 0.0
            continue
        res = jarque_bera(x)
        stats[i], pvals[i] = res.statistic, res.pvalue
    cross = 0.0
    if d > 1 and np.all(sub.std(axis=0) > 0):
        c = np.corrcoef(sub.T)
        cross = float(np.max(np.abs(c - np.diag(np.diag(c)))))
    return NormalityReport(stats, pvals, cross, threshold, sub.shape[0], stride)


def estimate_beta(samples) -> float:
    """Inverse temperature 1/var(p) in 1D; fixed to 1 in higher dimension."""
    p = _momenta(samples)
    if p.shape[1] > 1:
        return 1.0
    if p.shape[0] < 2:
        raise InsufficientDataError("need at least two momentum samples")
    var = float(np.var(p[:, 0], ddof=1))
    if not var > 0:
        raise DegenerateDataError("momentum samples have zero variance")
    return 1.0 / var


def beta_in_range(beta) -> bool:
    return BETA_RANGE[0] < beta < BETA_RANGE[1]


# --------------------------------------------------------------------------
# histogram
# --------------------------------------------------------------------------


@dataclass
class Histogram:
    edges: list
    counts: np.ndarray
    density: np.ndarray

    @property
    def dim(self):
        return len(self.edges)

    @property
    def centers(self):
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]

    @property
    def bin_volume(self):
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    @property
    def total(self):
        return int(self.counts.sum())

    def scaled(self, factor):
        """Same histogram with every density multiplied by ``factor``."""
        return Histogram(self.edges, self.counts, self.density * factor)

    def rows(self):
        """(center..., count, density) rows in C order."""
        grids = np.meshgrid(*self.centers, indexing="ij")
        cols = [g.ravel() for g in grids] + [self.counts.ravel(), self.density.ravel()]
        return np.column_stack(cols)


def _positions(samples):
    if isinstance(samples, SampleSet):
        return samples.qs
    q = np.asarray(samples, dtype=float)
    return q[:, None] if q.ndim == 1 else q


def histogram_density(samples, bins=200, range=None, pad=0.01) -> Histogram:
    """Normalized histogram of positions on uniform bins.

    Bins span ``range`` when given, otherwise ``[min, max]`` of the samples
    per dimension widened by ``pad`` of the span on each side.
    """
    q = _positions(samples)
    d = q.shape[1]
    if np.ndim(bins) == 0:
        bins = [int(bins)] * d
    if range is None:
        lo = q.min(axis=0)
        hi = q.max(axis=0)
        # a collapsed sample cloud still gets bins of representable width
        floor = 1e-6 * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
        span = np.maximum(hi - lo, floor)
        range = [(lo[i] - pad * span[i], hi[i] + pad * span[i]) for i in np.arange(d)]
    else:
        range = [tuple(r) for r in np.atleast_2d(np.asarray(range, dtype=float))]
    edges = [np.linspace(r[0], r[1], b + 1) for r, b in zip(range, bins)]
    counts, _ = np.histogramdd(q, bins=edges)
    counts = counts.astype(np.int64)
    vol = float(np.prod([e[1] - e[0] for e in edges]))
    total = counts.sum()
    density = counts / (total * vol) if total else np.zeros(counts.shape)
    return Histogram(edges, counts, density)


def kl_to_reference(hist: Histogram, cdf) -> float:
    """KL(hist || reference) with reference bin masses from a 1D ``cdf``."""
    e = hist.edges[0]
    ref = np.diff(cdf(e))
    emp = hist.counts / hist.counts.sum()
    m = emp > 0
    return float(np.sum(emp[m] * np.log(emp[m] / ref[m])))


# --------------------------------------------------------------------------
# fitted potentials
# --------------------------------------------------------------------------


class FittedPotential(KernelPotential):
    """Effective potential regressed from a log-density; usable as an oracle.

    Inside ``domain`` the value comes from the fitted basis; outside it the
    boundary value is continued with its gradient plus ``0.5 * distance^2``.
    """

    def __init__(self, basis, kind, params, dim, beta_hat, domain, gauge, knots, coeffs,
                 residual_rms=float("nan"), support=None, meta=None):
        super().__init__(kind, params, dim, name=f"fitted-{basis}")
        self.basis = basis
        self.beta_hat = float(beta_hat)
        self.domain = [tuple(map(float, d)) for d in domain]
        self.gauge = float(gauge)
        self.knots = knots
        self.coeffs = coeffs
        self.residual_rms = float(residual_rms)
        self.support = support
        self.meta = dict(meta or {})

    def in_domain(self, q, margin=0.0):
        q = np.asarray(q, dtype=float).reshape(-1, self.dim)
        ok = np.ones(q.shape[0], dtype=bool)
        for i, (lo, hi) in enumerate(self.domain):
            w = margin * (hi - lo)
            ok &= (q[:, i] >= lo - w) & (q[:, i] <= hi + w)
        return ok

    def to_dict(self):
        out = {
            "basis": self.basis,
            "dim": self.dim,
            "beta_hat": self.beta_hat,
            "domain": [list(d) for d in self.domain],
            "gauge": self.gauge,
            "knots": [np.asarray(k).tolist() for k in self.knots],
            "coeffs": np.asarray(self.coeffs).tolist(),
            "residual_rms": self.residual_rms,
        }
        if self.support is not None:
            out["support"] = np.asarray(self.support, dtype=int).tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        basis = data["basis"]
        knots = [np.asarray(k, dtype=float) for k in data["knots"]]
        coeffs = np.asarray(data["coeffs"], dtype=float)
        support = np.asarray(data["support"], dtype=bool) if "support" in data else None
        if basis == "cubic-bspline":
            return _spline_potential(knots[0], coeffs, data["beta_hat"], data["gauge"],
                                     data.get("residual_rms", float("nan")))
        if basis == "bilinear":
            return _bilinear_potential(knots, coeffs, data["beta_hat"], data["gauge"],
                                       data.get("residual_rms", float("nan")), support)
        raise ValueError(f"unknown basis {basis!r}")

    def local_minima(self, max_value=None):
        """Strict local minima of the fitted surface over supported nodes.

        1D: zeros of the derivative where it changes sign from - to + on a
        fine grid.  2D: nodes lower than all eight neighbours.  Returns an
        array of points sorted by fitted value.
        """
        if self.dim == 1:
            a, b = self.domain[0]
            x = np.linspace(a, b, 20001)
            g = self.gradients(x[:, None])[:, 0]
            idx = np.where((g[:-1] < 0) & (g[1:] >= 0))[0]
            pts = []
            for i in idx:
                # linear root of g on [x_i, x_{i+1}]
                t = g[i] / (g[i] - g[i + 1])
                pts.append(x[i] + t * (x[i + 1] - x[i]))
            pts = np.array(pts).reshape(-1, 1)
        else:
            gx, gy = self.knots
            z = self.coeffs
            nx, ny = z.shape
            sup = self.support if self.support is not None else np.ones_like(z, dtype=bool)
            pts = []
            for i in range(1, nx - 1):
                for j in range(1, ny - 1):
                    if not sup[i, j]:
                        continue
                    nb = z[i - 1:i + 2, j - 1:j + 2]
                    if z[i, j] < np.min(np.delete(nb.ravel(), 4)):
                        pts.append((gx[i], gy[j]))
            pts = np.array(pts).reshape(-1, 2)
        if len(pts) == 0:
            return pts
        vals = self.values(pts)
        order = np.argsort(vals)
        pts, vals = pts[order], vals[order]
        if max_value is not None:
            pts = pts[vals <= max_value]
        return pts


def _spline_params(knots, coeffs, shift):
    """Piecewise-cubic coefficient table of a clamped uniform B-spline."""
    from scipy.interpolate import BSpline

    spl = BSpline(knots, coeffs, 3, extrapolate=False)
    a, b = knots[3], knots[-4]
    brk = np.unique(knots[3:-3])
    n = len(brk) - 1
    h = (b - a) / n
    x = a + h * np.arange(n)
    mid = x + 0.5 * h
    c3 = spl(x) - shift
    c2 = spl(x, 1)
    c1 = 0.5 * spl(x, 2)
    c0 = spl(mid, 3) / 6.0
    table = np.column_stack([c0, c1, c2, c3]).ravel()
    va, ga = float(spl(a) - shift), float(spl(a, 1))
    vb, gb = float(spl(b) - shift), float(spl(b, 1))
    return np.concatenate([[a, b, n, h], table, [va, ga, vb, gb]])


def _spline_potential(knots, coeffs, beta_hat, gauge, residual, meta=None):
    knots = np.asarray(knots, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    params = _spline_params(knots, coeffs, gauge)
    domain = [(knots[3], knots[-4])]
    return FittedPotential("cubic-bspline", K.SPLINE1D, params, 1, beta_hat, domain, gauge,
                           [knots], coeffs, residual, meta=meta)


def _bilinear_potential(grids, z, beta_hat, gauge, residual, support, meta=None):
    gx, gy = (np.asarray(g, dtype=float) for g in grids)
    z = np.asarray(z, dtype=float)
    hx = (gx[-1] - gx[0]) / (len(gx) - 1)
    hy = (gy[-1] - gy[0]) / (len(gy) - 1)
    params = np.concatenate([[gx[0], gy[0], hx, hy, len(gx), len(gy)], (z - gauge).ravel()])
    domain = [(gx[0], gx[-1]), (gy[0], gy[-1])]
    return FittedPotential("bilinear", K.BILINEAR2D, params, 2, beta_hat, domain, gauge,
                           [gx, gy], z, residual, support, meta=meta)


def _targets(hist, beta_hat, count_floor):
    valid = hist.counts >= count_floor
    y = np.full(hist.counts.shape, np.nan)
    y[valid] = -np.log(hist.density[valid]) / beta_hat
    return valid, y


def fit_potential(hist: Histogram, beta_hat, basis_size=30, count_floor=COUNT_FLOOR,
                  smoothing=2.0, coarsen=1) -> FittedPotential:
    """Regress ``-log(density) / beta_hat`` onto a spline basis.

    Bins with fewer than ``count_floor`` samples are dropped and the rest
    are weighted by their counts (the inverse variance of a log count).
    The result is shifted so that its minimum over the domain is zero.

    1D uses cubic B-splines with ``basis_size`` uniform interior knots over
    the span of usable bins.  2D uses bilinear elements on the histogram
    grid (every ``coarsen``-th center) with a second-difference roughness
    penalty; ``smoothing`` is its length scale in grid nodes.
    """
    if not beta_hat > 0:
        raise DegenerateDataError("beta_hat must be positive")
    if hist.dim == 1:
        return _fit_1d(hist, beta_hat, int(basis_size), count_floor)
    if hist.dim == 2:
        return _fit_2d(hist, beta_hat, count_floor, smoothing, int(coarsen))
    raise IllPosedFitError("fitting is implemented for one and two dimensions")


def _fit_1d(hist, beta_hat, m, count_floor):
    valid, y = _targets(hist, beta_hat, count_floor)
    x = hist.centers[0][valid]
    y = y[valid]
    w = hist.counts[valid].astype(float)
    if m < 1:
        raise IllPosedFitError("basis_size must be at least 1")
    if len(x) < m + 4:
        raise IllPosedFitError(f"only {len(x)} usable bins for {m + 4} basis functions")
    a, b = x[0], x[-1]
    inner = np.linspace(a, b, m + 2)[1:-1]
    t = np.concatenate([[a] * 4, inner, [b] * 4])
    for j in range(len(t) - 4):
        lo, hi = t[j], t[j + 4]
        if not np.any((x >= lo) & (x <= hi)):
            raise IllPosedFitError(f"no usable bins in [{lo:.4g}, {hi:.4g}]; "
                                   "reduce basis_size or sample longer")
    try:
        spl = make_lsq_spline(x, y, t, k=3, w=np.sqrt(w))
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise IllPosedFitError(f"rank-deficient spline design on [{a:.4g}, {b:.4g}]: {exc}")
    grid = np.linspace(a, b, 40 * (m + 1) + 1)
    vals = spl(grid)
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(spl, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    gauge = float(min(vals[k], res.fun))
    resid = beta_hat * (spl(x) - y)
    rms = float(np.sqrt(np.sum(w * resid ** 2) / np.sum(w)))
    return _spline_potential(t, spl.c, beta_hat, gauge, rms)


def _second_diff(n):
    if n < 3:
        return sparse.csr_matrix((0, n))
    return sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n))


def _fit_2d(hist, beta_hat, count_floor, smoothing, coarsen):
    valid, y = _targets(hist, beta_hat, count_floor)
    if valid.sum() < 4:
        raise IllPosedFitError("fewer than four usable bins")
    cx, cy = hist.centers
    iv, jv = np.nonzero(valid)
    i0, i1 = iv.min(), iv.max()
    j0, j1 = jv.min(), jv.max()
    gx = cx[i0:i1 + 1][::coarsen]
    gy = cy[j0:j1 + 1][::coarsen]
    if len(gx) < 2 or len(gy) < 2:
        raise IllPosedFitError("usable bins do not span a two-dimensional region")
    nx, ny = len(gx), len(gy)
    hx = gx[1] - gx[0]
    hy = gy[1] - gy[0]
    xs, ys = cx[iv], cy[jv]
    w = hist.counts[valid].astype(float)
    t = y[valid]
    # bilinear interpolation weights of each usable bin center
    fi = np.clip((xs - gx[0]) / hx, 0, nx - 1 - 1e-12)
    fj = np.clip((ys - gy[0]) / hy, 0, ny - 1 - 1e-12)
    ii = np.minimum(fi.astype(int), nx - 2)
    jj = np.minimum(fj.astype(int), ny - 2)
    s = fi - ii
    r = fj - jj
    rows = np.repeat(np.arange(len(xs)), 4)
    cols = np.column_stack([ii * ny + jj, (ii + 1) * ny + jj, ii * ny + jj + 1,
                            (ii + 1) * ny + jj + 1]).ravel()
    vals = np.column_stack([(1 - s) * (1 - r), s * (1 - r), (1 - s) * r, s * r]).ravel()
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(xs), nx * ny))
    W = sparse.diags(w)
    Dx = sparse.kron(_second_diff(nx), sparse.identity(ny))
    Dy = sparse.kron(sparse.identity(nx), _second_diff(ny))
    lam = smoothing ** 4 * float(np.median(w))
    lhs = (A.T @ W @ A + lam * (Dx.T @ Dx + Dy.T @ Dy)).tocsc()
    rhs = A.T @ (w * t)
    try:
        z = spsolve(lhs, rhs)
    except Exception as exc:  # scipy raises several types for singular systems
        raise IllPosedFitError(f"singular bilinear design: {exc}")
    if not np.all(np.isfinite(z)):
        raise IllPosedFitError("singular bilinear design: usable bins are collinear")
    z = z.reshape(nx, ny)
    # nodes touching at least one usable bin
    support = np.zeros(nx * ny, dtype=bool)
    support[cols[vals > 0]] = True
    support = support.reshape(nx, ny)
    gauge = float(z.min())
    resid = beta_hat * (A @ z.ravel() - t)
    rms = float(np.sqrt(np.sum(w * resid ** 2) / np.sum(w)))
    return _bilinear_potential([gx, gy], z, beta_hat, gauge, rms, support)


def aligned_error(potential, reference, points):
    """L-infinity distance between two potentials up to an additive constant.

    The constant is chosen optimally, i.e. the result is half the spread of
    ``potential - reference`` over ``points``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, potential.dim)
    if len(pts) == 0:
        raise InsufficientDataError("no comparison points")
    diff = potential.values(pts) - reference.values(pts)
    return 0.5 * float(diff.max() - diff.min())


def well_sampled(hist: Histogram, threshold=1e-3):
    """Bin centers whose empirical density exceeds ``threshold``."""
    grids = np.meshgrid(*hist.centers, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    return pts[hist.density.ravel() > threshold]


# --------------------------------------------------------------------------
# pipelines
# --------------------------------------------------------------------------


@dataclass
class LearnResult:
    samples_meta: dict
    normality: NormalityReport
    beta_hat: float
    histogram: Histogram | None
    fit: FittedPotential | None
    warnings: list = field(default_factory=list)


def learn_potential(oracle, config, init, bins=None, basis_size=30, count_floor=COUNT_FLOOR,
                    smoothing=2.0, threshold=0.01, normality_points=5000,
                    require_normal=True, samples=None) -> LearnResult:
    """Simulate, gate on normality, estimate the temperature and fit.

    ``config`` is a :class:`SimConfig` carrying the friction (scalar in 1D,
    calibrated matrix in higher dimension).  When the gate fails and
    ``require_normal`` is set, no fit is produced.
    """
    from .integrators import simulate_damped

    if samples is None:
        samples = simulate_damped(oracle, config, init)
    meta = {k: v for k, v in samples.meta.items() if k != "final_state"}
    warn = []
    rep = normality_test(samples, threshold, max_points=normality_points)
    beta = estimate_beta(samples) if samples.dim == 1 else 1.0
    if samples.dim == 1 and not beta_in_range(beta):
        warn.append(f"beta_hat={beta:.4g} outside {BETA_RANGE}")
    if not rep.passed:
        warn.append("normality gate failed: momenta are not Gaussian at this step size")
        if require_normal:
            return LearnResult(meta, rep, beta, None, None, warn)
    if bins is None:
        bins = 200 if samples.dim == 1 else 80
    hist = histogram_density(samples, bins)
    fit = fit_potential(hist, beta, basis_size, count_floor, smoothing)
    return LearnResult(meta, rep, beta, hist, fit, warn)


@dataclass
class ScanEntry:
    delta: float
    normality: NormalityReport | None
    beta_hat: float | None
    fit: FittedPotential | None
    error: str | None = None

    @property
    def ok(self):
        return self.fit is not None

    def to_dict(self):
        return {
            "delta": self.delta,
            "status": "fit" if self.ok else ("failed" if self.error else "rejected"),
            "normality": self.normality.to_dict() if self.normality else None,
            "beta_hat": self.beta_hat,
            "error": self.error,
        }


def _scan_job(args):
    from .errors import EffPotError

    oracle, config, init, delta, kw = args
    try:
        res = learn_potential(oracle, config.with_(delta=delta), init, **kw)
    except EffPotError as exc:
        return ScanEntry(delta, None, None, None, f"{type(exc).__name__}: {exc}")
    return ScanEntry(delta, res.normality, res.beta_hat, res.fit)


def scale_scan(oracle, deltas, config, init, jobs=None, **kw) -> list:
    """Run the damped scheme at each step size and fit where momenta pass
    the normality gate.  Failing step sizes are reported, never raised."""
    from ._parallel import pmap
    from .errors import ConfigurationError

    deltas = [float(x) for x in deltas]
    if not deltas or any(x <= 0 for x in deltas):
        raise ConfigurationError("step sizes must be positive", "scan.deltas")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ConfigurationError("step sizes must be strictly decreasing", "scan.deltas")
    return pmap(_scan_job, [(oracle, config, init, d, kw) for d in deltas], jobs)
