"""Hot loops: Euler-Maruyama path stepping and fixed-step RK4 sweeps.

Every kernel exists in two flavours. The numba flavour is compiled with
``@njit`` and used by default when numba imports cleanly. Setting the
environment variable ``CONSTRAINED_KYLE_NUMBA=0`` selects the pure-numpy
fallback for the whole process; individual calls may also pass
``backend="numpy"`` or ``backend="numba"``.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False


def _env_wants_numba():
    flag = os.environ.get("CONSTRAINED_KYLE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def resolve_backend(backend=None):
    """Map a requested backend name (or None) to the one actually used."""
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        return "numpy"
    return backend


def _maybe_njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Euler-Maruyama for the equilibrium (theta, Q, P, Y) system
# ---------------------------------------------------------------------------
# coef rows: 0 beta, 1 alpha, 2 r, 3 s, 4 lambda, 5 mu; column i holds the
# left-endpoint value at t_i = i * dt for i = 0..n_steps-1.
# record_idx holds grid indices in [0, n_steps]; index n_steps is T-.


def _em_paths_loop(coef, a, dw, dt, sigma_w, record_idx, records, terminal, value):
    n_paths, n_steps = dw.shape
    n_rec = record_idx.shape[0]
    beta = coef[0]
    alpha = coef[1]
    r = coef[2]
    s = coef[3]
    lam = coef[4]
    mu = coef[5]
    for p in range(n_paths):
        ap = a[p]
        theta = 0.0
        q = 0.0
        price = 0.0
        y = 0.0
        v = 0.0
        k = 0
        for i in range(n_steps + 1):
            while k < n_rec and record_idx[k] == i:
                records[p, k, 0] = theta
                records[p, k, 1] = q
                records[p, k, 2] = price
                records[p, k, 3] = y
                k += 1
            if i == n_steps:
                break
            x = ap - theta - q
            rate = beta[i] * x + alpha[i] * q
            dy = rate * dt + sigma_w * dw[p, i]
            dp = lam[i] * dy + mu[i] * q * dt
            v += (ap - theta) * dp
            q = q + r[i] * dy + s[i] * q * dt
            theta = theta + rate * dt
            price = price + dp
            y = y + dy
        terminal[p, 0] = theta
        terminal[p, 1] = q
        terminal[p, 2] = price
        terminal[p, 3] = y
        value[p] = v


_em_paths_numba = _maybe_njit(_em_paths_loop)


def _em_paths_numpy(coef, a, dw, dt, sigma_w, record_idx, records, terminal, value):
    n_paths, n_steps = dw.shape
    theta = np.zeros(n_paths)
    q = np.zeros(n_paths)
    price = np.zeros(n_paths)
    y = np.zeros(n_paths)
    v = np.zeros(n_paths)
    slots = {}
    for k, idx in enumerate(record_idx):
        slots.setdefault(int(idx), []).append(k)
    for i in range(n_steps + 1):
        for k in slots.get(i, ()):
            records[:, k, 0] = theta
            records[:, k, 1] = q
            records[:, k, 2] = price
            records[:, k, 3] = y
        if i == n_steps:
            break
        beta, alpha, r, s, lam, mu = coef[:, i]
        x = a - theta - q
        rate = beta * x + alpha * q
        dy = rate * dt + sigma_w * dw[:, i]
        dp = lam * dy + mu * q * dt
        v += (a - theta) * dp
        q = q + r * dy + s * q * dt
        theta = theta + rate * dt
        price = price + dp
        y = y + dy
    terminal[:, 0] = theta
    terminal[:, 1] = q
    terminal[:, 2] = price
    terminal[:, 3] = y
    value[:] = v


def em_paths(coef, a, dw, dt, sigma_w, record_idx, backend=None):
    """Simulate a block of paths.

    Returns ``(records, terminal, value)`` where ``records[p, k]`` is
    ``(theta, Q, P, Y)`` at grid index ``record_idx[k]``, ``terminal[p]`` is
    the same tuple at ``T-`` and ``value[p]`` is the discretised
    ``sum (a - theta_i) (P_{i+1} - P_i)`` over ``[0, T)``.
    """
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    dw = np.ascontiguousarray(dw, dtype=np.float64)
    record_idx = np.ascontiguousarray(record_idx, dtype=np.int64)
    n_paths = dw.shape[0]
    records = np.empty((n_paths, record_idx.shape[0], 4))
    terminal = np.empty((n_paths, 4))
    value = np.empty(n_paths)
    if resolve_backend(backend) == "numba":
        _em_paths_numba(coef, a, dw, float(dt), float(sigma_w), record_idx,
                        records, terminal, value)
    else:
        _em_paths_numpy(coef, a, dw, float(dt), float(sigma_w), record_idx,
                        records, terminal, value)
    return records, terminal, value


# ---------------------------------------------------------------------------
# RK4 sweeps
# ---------------------------------------------------------------------------


def _rk4_r_sigma1_loop(r0, s1_0, sw2, h, n_points, out):
    # out[:, 0] = Sigma1, out[:, 1] = r. Stops early on blow-up and returns the
    # number of valid rows.
    s1 = s1_0
    r = r0
    out[0, 0] = s1
    out[0, 1] = r
    for i in range(1, n_points):
        k1s = -sw2 * (r * r + 2.0 * r)
        k1r = -sw2 * r * r * (1.0 + r) * (1.0 + 2.0 * r) / ((1.0 + 3.0 * r) * s1)
        s_b = s1 + 0.5 * h * k1s
        r_b = r + 0.5 * h * k1r
        k2s = -sw2 * (r_b * r_b + 2.0 * r_b)
        k2r = -sw2 * r_b * r_b * (1.0 + r_b) * (1.0 + 2.0 * r_b) / ((1.0 + 3.0 * r_b) * s_b)
        s_c = s1 + 0.5 * h * k2s
        r_c = r + 0.5 * h * k2r
        k3s = -sw2 * (r_c * r_c + 2.0 * r_c)
        k3r = -sw2 * r_c * r_c * (1.0 + r_c) * (1.0 + 2.0 * r_c) / ((1.0 + 3.0 * r_c) * s_c)
        s_d = s1 + h * k3s
        r_d = r + h * k3r
        k4s = -sw2 * (r_d * r_d + 2.0 * r_d)
        k4r = -sw2 * r_d * r_d * (1.0 + r_d) * (1.0 + 2.0 * r_d) / ((1.0 + 3.0 * r_d) * s_d)
        s1 = s1 + h * (k1s + 2.0 * k2s + 2.0 * k3s + k4s) / 6.0
        r = r + h * (k1r + 2.0 * k2r + 2.0 * k3r + k4r) / 6.0
        if not (np.isfinite(s1) and np.isfinite(r)) or s1 <= 0.0:
            return i
        out[i, 0] = s1
        out[i, 1] = r
    return n_points


def _rk4_linear1_loop(a, b, y0, h, out):
    # y' = a(t) y + b(t); a, b sampled on the half-step grid (2n + 1 points).
    n = out.shape[0] - 1
    y = y0
    out[0] = y
    for i in range(n):
        j = 2 * i
        k1 = a[j] * y + b[j]
        k2 = a[j + 1] * (y + 0.5 * h * k1) + b[j + 1]
        k3 = a[j + 1] * (y + 0.5 * h * k2) + b[j + 1]
        k4 = a[j + 2] * (y + h * k3) + b[j + 2]
        y = y + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        out[i + 1] = y
    return n + 1


def _rk4_linear2_loop(m, b, y0, h, out):
    # (u, w)' = M(t) (u, w) + b(t); m has shape (4, 2n + 1) as m11, m12, m21,
    # m22 and b has shape (2, 2n + 1).
    n = out.shape[0] - 1
    u = y0[0]
    w = y0[1]
    out[0, 0] = u
    out[0, 1] = w
    for i in range(n):
        j = 2 * i
        k1u = m[0, j] * u + m[1, j] * w + b[0, j]
        k1w = m[2, j] * u + m[3, j] * w + b[1, j]
        ub = u + 0.5 * h * k1u
        wb = w + 0.5 * h * k1w
        k2u = m[0, j + 1] * ub + m[1, j + 1] * wb + b[0, j + 1]
        k2w = m[2, j + 1] * ub + m[3, j + 1] * wb + b[1, j + 1]
        uc = u + 0.5 * h * k2u
        wc = w + 0.5 * h * k2w
        k3u = m[0, j + 1] * uc + m[1, j + 1] * wc + b[0, j + 1]
        k3w = m[2, j + 1] * uc + m[3, j + 1] * wc + b[1, j + 1]
        ud = u + h * k3u
        wd = w + h * k3w
        k4u = m[0, j + 2] * ud + m[1, j + 2] * wd + b[0, j + 2]
        k4w = m[2, j + 2] * ud + m[3, j + 2] * wd + b[1, j + 2]
        u = u + h * (k1u + 2.0 * k2u + 2.0 * k3u + k4u) / 6.0
        w = w + h * (k1w + 2.0 * k2w + 2.0 * k3w + k4w) / 6.0
        out[i + 1, 0] = u
        out[i + 1, 1] = w
    return n + 1


_rk4_r_sigma1_numba = _maybe_njit(_rk4_r_sigma1_loop)
_rk4_linear1_numba = _maybe_njit(_rk4_linear1_loop)
_rk4_linear2_numba = _maybe_njit(_rk4_linear2_loop)


def rk4_r_sigma1(r0, sigma1_0, sigma_w2, h, n_points, backend=None):
    out = np.full((n_points, 2), np.nan)
    fn = _rk4_r_sigma1_numba if resolve_backend(backend) == "numba" else _rk4_r_sigma1_loop
    n_ok = fn(float(r0), float(sigma1_0), float(sigma_w2), float(h), int(n_points), out)
    return out, int(n_ok)


def rk4_linear1(a, b, y0, h, backend=None):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0] - 1) // 2 + 1)
    fn = _rk4_linear1_numba if resolve_backend(backend) == "numba" else _rk4_linear1_loop
    fn(a, b, float(y0), float(h), out)
    return out


def rk4_linear2(m, b, y0, h, backend=None):
    m = np.ascontiguousarray(m, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    out = np.empty(((m.shape[1] - 1) // 2 + 1, 2))
    fn = _rk4_linear2_numba if resolve_backend(backend) == "numba" else _rk4_linear2_loop
    fn(m, b, y0, float(h), out)
    return out
