"""Compiled potential kernels and inner integration loops.

Every potential the fast path understands is identified by an integer kind
and a flat float64 parameter vector, so a single compiled dispatcher serves
all of them and numba's on-disk cache stays valid.
"""

import numpy as np
from numba import njit

MULTISINE = 0
COSSUM = 1
QUAD2D = 2
MULLER = 3
QUADRATIC = 4
SPLINE1D = 5
BILINEAR2D = 6
ZERO = 7

# Muller-Brown coefficients: A, a, b, c, x0, y0
_MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
_MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
_MB_b = np.array([0.0, 0.0, 11.0, 0.6])
_MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
_MB_X = np.array([1.0, 0.0, -0.5, -1.0])
_MB_Y = np.array([0.0, 0.5, 1.5, 1.0])

STATUS_OK = 0
STATUS_DIVERGED = 1
Q_LIMIT = 1e8


# --------------------------------------------------------------------------
# potential kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _macro1d(macro, c, x):
    y = x - c
    if macro == 1:
        return 0.5 * y * y, y
    if macro == 2:
        s = y * y - 1.0
        return 0.25 * s * s, y * s
    return 0.0, 0.0


@njit(cache=True)
def _muller(x, y):
    v = 0.0
    gx = 0.0
    gy = 0.0
    for k in range(4):
        dx = x - _MB_X[k]
        dy = y - _MB_Y[k]
        e = _MB_A[k] * np.exp(_MB_a[k] * dx * dx + _MB_b[k] * dx * dy + _MB_c[k] * dy * dy)
        v += e
        gx += e * (2.0 * _MB_a[k] * dx + _MB_b[k] * dy)
        gy += e * (_MB_b[k] * dx + 2.0 * _MB_c[k] * dy)
    return v, gx, gy


@njit(cache=True)
def _spline_piece(params, x):
    # params: a, b, n, h, coeffs[4n], va, ga, vb, gb
    a = params[0]
    b = params[1]
    n = int(params[2])
    h = params[3]
    if x < a:
        va = params[4 + 4 * n]
        ga = params[5 + 4 * n]
        dx = x - a
        return va + ga * dx + 0.5 * dx * dx, ga + dx
    if x > b:
        vb = params[6 + 4 * n]
        gb = params[7 + 4 * n]
        dx = x - b
        return vb + gb * dx + 0.5 * dx * dx, gb + dx
    i = int((x - a) / h)
    if i >= n:
        i = n - 1
    t = x - (a + i * h)
    off = 4 + 4 * i
    c0 = params[off]
    c1 = params[off + 1]
    c2 = params[off + 2]
    c3 = params[off + 3]
    v = ((c0 * t + c1) * t + c2) * t + c3
    g = (3.0 * c0 * t + 2.0 * c1) * t + c2
    return v, g


@njit(cache=True)
def _bilinear_cell(params, px, py):
    # params: x0, y0, hx, hy, nx, ny, values[nx*ny] (row-major in x)
    x0 = params[0]
    y0 = params[1]
    hx = params[2]
    hy = params[3]
    nx = int(params[4])
    ny = int(params[5])
    i = int((px - x0) / hx)
    j = int((py - y0) / hy)
    if i > nx - 2:
        i = nx - 2
    if j > ny - 2:
        j = ny - 2
    if i < 0:
        i = 0
    if j < 0:
        j = 0
    s = (px - (x0 + i * hx)) / hx
    t = (py - (y0 + j * hy)) / hy
    f00 = params[6 + i * ny + j]
    f10 = params[6 + (i + 1) * ny + j]
    f01 = params[6 + i * ny + j + 1]
    f11 = params[6 + (i + 1) * ny + j + 1]
    a = f00
    b = f10 - f00
    c = f01 - f00
    e = f11 - f10 - f01 + f00
    v = a + b * s + c * t + e * s * t
    ux = (b + e * t) / hx
    uy = (c + e * s) / hy
    uxy = e / (hx * hy)
    return v, ux, uy, uxy


@njit(cache=True)
def _bilinear(params, qx, qy):
    x0 = params[0]
    y0 = params[1]
    x1 = x0 + params[2] * (params[4] - 1.0)
    y1 = y0 + params[3] * (params[5] - 1.0)
    px = min(max(qx, x0), x1)
    py = min(max(qy, y0), y1)
    dx = qx - px
    dy = qy - py
    v, ux, uy, uxy = _bilinear_cell(params, px, py)
    val = v + ux * dx + uy * dy + 0.5 * (dx * dx + dy * dy)
    gx = ux + dx
    gy = uy + dy
    if dx == 0.0:
        gx += uxy * dy
    if dy == 0.0:
        gy += uxy * dx
    return val, gx, gy


@njit(cache=True)
def value(kind, params, q):
    if kind == MULTISINE:
        macro = int(params[0])
        v, _ = _macro1d(macro, params[1], q[0])
        for j in range(int(params[2])):
            eps = params[3 + j]
            v += eps * np.sin(q[0] / eps)
        return v
    if kind == COSSUM:
        y = q[0] - params[1]
        v = params[0] * 0.25 * y * y
        for i in range(int(params[2]), int(params[3]) + 1):
            i2 = float(i * i)
            v += np.cos(i2 * q[0]) / i2
        return v
    if kind == QUAD2D:
        x = q[0]
        y = q[1]
        eps = params[2]
        a = 2.0 * x + y - 1.0
        b = x - y - 1.0
        v0 = 0.25 * a * a + b * b
        v1 = eps * (np.sin(x / eps) + np.sin((x + y) / eps))
        return params[0] * v0 + params[1] * v1
    if kind == MULLER:
        x = q[0]
        y = q[1]
        eps = params[2]
        vm, _, _ = _muller(x, y)
        dx = x - params[3]
        dy = y - params[4]
        vq = 35.0136 * dx * dx + 59.8399 * dy * dy
        v1 = eps * (np.sin(x / eps) + np.sin((-x + y) / eps))
        return params[0] * 0.1 * (vq + vm) + params[1] * v1
    if kind == QUADRATIC:
        d = int(params[0])
        v = 0.0
        for i in range(d):
            yi = q[i] - params[1 + d * d + i]
            for j in range(d):
                yj = q[j] - params[1 + d * d + j]
                v += 0.5 * yi * params[1 + i * d + j] * yj
        return v
    if kind == SPLINE1D:
        v, _ = _spline_piece(params, q[0])
        return v
    if kind == BILINEAR2D:
        v, _, _ = _bilinear(params, q[0], q[1])
        return v
    return 0.0


@njit(cache=True)
def gradient(kind, params, q, out):
    if kind == MULTISINE:
        macro = int(params[0])
        _, g = _macro1d(macro, params[1], q[0])
        for j in range(int(params[2])):
            g += np.cos(q[0] / params[3 + j])
        out[0] = g
    elif kind == COSSUM:
        g = params[0] * 0.5 * (q[0] - params[1])
        for i in range(int(params[2]), int(params[3]) + 1):
            i2 = float(i * i)
            g -= np.sin(i2 * q[0])
        out[0] = g
    elif kind == QUAD2D:
        x = q[0]
        y = q[1]
        eps = params[2]
        a = 2.0 * x + y - 1.0
        b = x - y - 1.0
        cx = np.cos(x / eps)
        cxy = np.cos((x + y) / eps)
        out[0] = params[0] * (a + 2.0 * b) + params[1] * (cx + cxy)
        out[1] = params[0] * (0.5 * a - 2.0 * b) + params[1] * cxy
    elif kind == MULLER:
        x = q[0]
        y = q[1]
        eps = params[2]
        _, gx, gy = _muller(x, y)
        gx += 2.0 * 35.0136 * (x - params[3])
        gy += 2.0 * 59.8399 * (y - params[4])
        cx = np.cos(x / eps)
        cyx = np.cos((-x + y) / eps)
        out[0] = params[0] * 0.1 * gx + params[1] * (cx - cyx)
        out[1] = params[0] * 0.1 * gy + params[1] * cyx
    elif kind == QUADRATIC:
        d = int(params[0])
        for i in range(d):
            g = 0.0
            for j in range(d):
                g += params[1 + i * d + j] * (q[j] - params[1 + d * d + j])
            out[i] = g
    elif kind == SPLINE1D:
        _, g = _spline_piece(params, q[0])
        out[0] = g
    elif kind == BILINEAR2D:
        _, gx, gy = _bilinear(params, q[0], q[1])
        out[0] = gx
        out[1] = gy
    else:
        for i in range(q.shape[0]):
            out[i] = 0.0


@njit(cache=True)
def values(kind, params, qs):
    n = qs.shape[0]
    out = np.empty(n)
    for k in range(n):
        out[k] = value(kind, params, qs[k])
    return out


@njit(cache=True)
def gradients(kind, params, qs):
    out = np.empty_like(qs)
    for k in range(qs.shape[0]):
        gradient(kind, params, qs[k], out[k])
    return out


# --------------------------------------------------------------------------
# integration loops
# --------------------------------------------------------------------------


@njit(cache=True)
def _matvec_add(mat, v, scale, out):
    # out += scale * mat @ v
    d = v.shape[0]
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += mat[i, j] * v[j]
        out[i] += scale * acc


@njit(cache=True)
def _bad(q):
    for i in range(q.shape[0]):
        x = q[i]
        if not np.isfinite(x) or abs(x) > Q_LIMIT:
            return True
    return False


@njit(cache=True)
def run_chunk(kind, params, q, p, minv, damp, delta, n_steps, noise, chol,
              damp_kick, phase, stride, out_q, out_p, n_out):
    """Advance (q, p) in place by ``n_steps`` steps of half drift, kick,
    half drift.

    The momentum update is ``damp @ p - delta * grad`` (dissipative Verlet)
    or, with ``damp_kick``, ``damp @ (p - delta * grad)`` (kick followed by
    an Ornstein-Uhlenbeck refresh).  ``noise`` is empty or an (n_steps, d)
    array of standard normals entering as ``chol @ noise[n]``.  Step ``n``
    (0-based, local) is stored when ``(phase + n + 1) % stride == 0``.

    On divergence (q, p) are restored to the last finite state.
    Returns (status, steps_done, n_out, grad_evals).
    """
    d = q.shape[0]
    g = np.empty(d)
    tmp = np.empty(d)
    q_prev = np.empty(d)
    p_prev = np.empty(d)
    half = 0.5 * delta
    noisy = noise.shape[0] > 0
    cap = out_q.shape[0]
    evals = 0
    for n in range(n_steps):
        for i in range(d):
            q_prev[i] = q[i]
            p_prev[i] = p[i]
        _matvec_add(minv, p, half, q)
        gradient(kind, params, q, g)
        evals += 1
        for i in range(d):
            tmp[i] = 0.0
        if damp_kick:
            for i in range(d):
                p[i] -= delta * g[i]
            _matvec_add(damp, p, 1.0, tmp)
        else:
            _matvec_add(damp, p, 1.0, tmp)
            for i in range(d):
                tmp[i] -= delta * g[i]
        if noisy:
            _matvec_add(chol, noise[n], 1.0, tmp)
        for i in range(d):
            p[i] = tmp[i]
        _matvec_add(minv, p, half, q)
        if _bad(q) or _bad(p):
            for i in range(d):
                q[i] = q_prev[i]
                p[i] = p_prev[i]
            return STATUS_DIVERGED, n, n_out, evals
        if (phase + n + 1) % stride == 0 and n_out < cap:
            for i in range(d):
                out_q[n_out, i] = q[i]
                out_p[n_out, i] = p[i]
            n_out += 1
    return STATUS_OK, n_steps, n_out, evals
