"""Independent ODE route: fixed-step RK4 integration of the raw equations.

Nothing here evaluates the closed-form solutions of the integrated
quantities themselves. The ``(r, Sigma1)`` system is integrated from its
autonomous right-hand side alone; the remaining equations are linear in
their unknowns and only borrow the time-dependent coefficients (``alpha``,
``beta``, ``lambda``, ``r``, ``J``) from :mod:`constrained_kyle.closed_form`.
``Sigma3 = E[Q_t^2]`` has no closed form, so :func:`integrate_sigma3` is
its reference value.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import _kernels
from .closed_form import (
    _alpha_of_r,
    _beta_of_r,
    _J_of_r,
    _lambda_of_r,
    f_of_t,
    g_of_t,
    K_of_t,
    r_of_t,
    sigma1_of_t,
    sigma2_of_t,
    sigma4_of_t,
)

MIN_STEPS = 100


class OracleError(RuntimeError):
    """The integration produced a non-finite or inadmissible state."""


@dataclass(frozen=True)
class OdeSolution:
    grid: np.ndarray
    values: np.ndarray
    names: tuple
    meta: dict = field(default_factory=dict)
    derivs: np.ndarray = None

    def component(self, name):
        return self.values[:, self.names.index(name)]

    def at(self, t, name=None):
        """Cubic Hermite interpolation between nodes (fourth order, like the integrator)."""
        col = 0 if name is None else self.names.index(name)
        if self.derivs is None:
            return np.interp(t, self.grid, self.values[:, col])
        spline = CubicHermiteSpline(self.grid, self.values[:, col], self.derivs[:, col])
        out = spline(np.asarray(t, dtype=np.float64))
        return float(out) if np.ndim(out) == 0 else out


def _check_steps(n_steps):
    if n_steps < MIN_STEPS:
        raise ValueError(f"n_steps must be >= {MIN_STEPS}, got {n_steps}")


def _stop_grid(T, n_steps):
    # The singular systems stop at T - delta_stop with
    # delta_stop = max(1e-6 T, h); grid nodes stay on t_i = i h.
    h = T / n_steps
    delta = max(1e-6 * T, h)
    last = int(np.floor((T - delta) / h * (1 + 1e-12)))
    return h, last


def _half_grid(T, n_steps, last=None):
    h = T / n_steps
    if last is None:
        last = n_steps
    return h, np.arange(2 * last + 1) * (h / 2)


def _finite_or_raise(values, what):
    if not np.all(np.isfinite(values)):
        raise OracleError(f"{what}: non-finite state encountered")


def integrate_r_sigma1(params, r0, n_steps, backend=None):
    """RK4 on ``Sigma1' = -sigma_w^2 (r^2 + 2r)`` and the autonomous ``r'`` equation.

    Starts from ``(sigma_a^2, r0)`` and stops at ``T - delta_stop`` because
    ``Sigma1`` sits in the denominator of ``r'`` and vanishes at ``T``.
    """
    _check_steps(n_steps)
    if not r0 > 0:
        raise ValueError("r0 must be > 0")
    T = params.T
    h, last = _stop_grid(T, n_steps)
    out, n_ok = _kernels.rk4_r_sigma1(r0, params.sigma_a**2, params.sigma_w**2, h, last + 1, backend)
    if n_ok < last + 1:
        raise OracleError(
            f"(r, Sigma1) blew up at t = {n_ok * h:.6g} < T - delta_stop; r0 = {r0!r} is not the calibrated root"
        )
    grid = np.arange(last + 1) * h
    sigma1, r = out[:, 0], out[:, 1]
    sw2 = params.sigma_w**2
    d_sigma1 = -sw2 * (r * r + 2 * r)
    d_r = -sw2 * r * r * (1 + r) * (1 + 2 * r) / ((1 + 3 * r) * sigma1)
    return OdeSolution(
        grid=grid,
        values=np.column_stack([r, sigma1]),
        names=("r", "sigma1"),
        meta={"method": "rk4", "step": h, "one_sided_end": True},
        derivs=np.column_stack([d_r, d_sigma1]),
    )


def integrate_sigma3(sol, n_steps, backend=None):
    """``Sigma3' = -2 alpha Sigma3 + sigma_w^2 r^2`` from ``Sigma3(0) = 0`` on ``[0, T]``.

    The value at ``T`` is a one-sided limit (``meta['one_sided_end']``).
    """
    _check_steps(n_steps)
    T = sol.params.T
    h, th = _half_grid(T, n_steps)
    r = r_of_t(sol, th)
    alpha = _alpha_of_r(sol, r)
    b = sol.params.sigma_w**2 * r * r
    y = _kernels.rk4_linear1(-2 * alpha, b, 0.0, h, backend)
    _finite_or_raise(y, "Sigma3")
    grid = th[::2]
    deriv = -2 * alpha[::2] * y + b[::2]
    return OdeSolution(grid, y[:, None], ("sigma3",),
                       {"method": "rk4", "step": h, "one_sided_end": True}, deriv[:, None])


def integrate_sigma2(sol, n_steps, backend=None):
    """``Sigma2' = -sigma_w^2 (1 + r) lambda`` from ``Sigma2(0) = rho sigma_a sigma_v`` on ``[0, T]``."""
    _check_steps(n_steps)
    p = sol.params
    h, th = _half_grid(p.T, n_steps)
    r = r_of_t(sol, th)
    b = -p.sigma_w**2 * (1 + r) * _lambda_of_r(sol, r)
    y = _kernels.rk4_linear1(np.zeros_like(b), b, p.rho * p.sigma_a * p.sigma_v, h, backend)
    _finite_or_raise(y, "Sigma2")
    return OdeSolution(th[::2], y[:, None], ("sigma2",), {"method": "rk4", "step": h}, b[::2, None])


def integrate_sigma4(sol, n_steps, backend=None):
    """``Sigma4' = -sigma_w^2 lambda^2`` from ``Sigma4(0) = sigma_v^2`` on ``[0, T]``."""
    _check_steps(n_steps)
    T = sol.params.T
    h, th = _half_grid(T, n_steps)
    lam = _lambda_of_r(sol, r_of_t(sol, th))
    b = -sol.params.sigma_w**2 * lam * lam
    y = _kernels.rk4_linear1(np.zeros_like(b), b, sol.params.sigma_v**2, h, backend)
    _finite_or_raise(y, "Sigma4")
    return OdeSolution(th[::2], y[:, None], ("sigma4",), {"method": "rk4", "step": h}, b[::2, None])


def integrate_fg(sol, n_steps, backend=None):
    """Conditional-mean system for ``f = E[theta|a]/a`` and ``g = E[Q|a]/a``.

    ``f' = beta (1 - f - g) + alpha g`` and ``g' = r beta (1 - f - g) - alpha g``
    from ``(0, 0)``, stopped at ``T - delta_stop`` where ``beta`` diverges.
    """
    _check_steps(n_steps)
    T = sol.params.T
    h, last = _stop_grid(T, n_steps)
    _, th = _half_grid(T, n_steps, last)
    r = r_of_t(sol, th)
    beta = _beta_of_r(sol, r)
    alpha = _alpha_of_r(sol, r)
    rb = r * beta
    m = np.vstack([-beta, alpha - beta, -rb, -(rb + alpha)])
    b = np.vstack([beta, rb])
    y = _kernels.rk4_linear2(m, b, np.zeros(2), h, backend)
    _finite_or_raise(y, "(f, g)")
    gap = 1 - y[:, 0] - y[:, 1]
    df = beta[::2] * gap + alpha[::2] * y[:, 1]
    dg = rb[::2] * gap - alpha[::2] * y[:, 1]
    return OdeSolution(th[::2], y, ("f", "g"),
                       {"method": "rk4", "step": h, "one_sided_end": True},
                       np.column_stack([df, dg]))


def integrate_K(sol, n_steps, backend=None):
    """Backward RK4 on ``K' = -sigma_w^2 (I - J) r^2`` from ``K(T) = 0``."""
    _check_steps(n_steps)
    T = sol.params.T
    h, th = _half_grid(T, n_steps)
    r = r_of_t(sol, th)
    b = -sol.params.sigma_w**2 * (sol.I - _J_of_r(sol, r)) * r * r
    # integrate in reversed time s = T - t, so dK/ds = -b
    y_rev = _kernels.rk4_linear1(np.zeros_like(b), -b[::-1], 0.0, h, backend)
    _finite_or_raise(y_rev, "K")
    y = y_rev[::-1]
    return OdeSolution(th[::2], y[:, None], ("K",), {"method": "rk4-backward", "step": h}, b[::2, None])


# closed forms used as the other side of each comparison
_REFERENCES = {
    "r": r_of_t,
    "sigma1": sigma1_of_t,
    "sigma2": sigma2_of_t,
    "sigma4": sigma4_of_t,
    "f": f_of_t,
    "g": g_of_t,
    # tighter than the default so the reference sits below the RK4 error
    "K": lambda sol, t: K_of_t(sol, t, epsabs=1e-14),
}

ORACLE_WINDOW = 1e-3


def oracle_gaps(sol, n_steps, window=ORACLE_WINDOW, backend=None):
    """Sup-norm gap between each RK4 curve and its closed form on ``[0, T - window]``."""
    T = sol.params.T
    runs = [
        integrate_r_sigma1(sol.params, sol.r0, n_steps, backend),
        integrate_sigma2(sol, n_steps, backend),
        integrate_sigma4(sol, n_steps, backend),
        integrate_fg(sol, n_steps, backend),
        integrate_K(sol, n_steps, backend),
    ]
    gaps = {}
    for run in runs:
        keep = run.grid <= T - window * T + 1e-12 * T
        t = run.grid[keep]
        for name in run.names:
            ref = np.asarray(_REFERENCES[name](sol, t))
            gaps[name] = float(np.max(np.abs(run.component(name)[keep] - ref)))
    return gaps


# Smooth systems converge from the coarsest allowed grid. The singular ones
# are only asymptotic once the grid resolves the window, and T - window must
# be a grid node at every level so the sup is taken over the same interval.
SMOOTH_LADDER = tuple(MIN_STEPS * 2**k for k in range(6))
SINGULAR_LADDER = tuple(1000 * 2**k for k in range(5))
SYSTEMS = {
    "r_sigma1": (("r", "sigma1"), True),
    "sigma2": (("sigma2",), False),
    "sigma4": (("sigma4",), False),
    "fg": (("f", "g"), True),
    "K": (("K",), False),
}
# relative gap below which round-off, not truncation, dominates; the
# singular closed forms lose a few more digits near T
ROUNDOFF_FLOOR = {True: 1e-13, False: 5e-15}


@dataclass(frozen=True)
class ConvergenceOrder:
    system: str
    steps: tuple
    gaps: tuple
    orders: tuple

    @property
    def observable(self):
        return bool(self.steps)


def convergence_orders(sol, window=ORACLE_WINDOW, backend=None):
    """Observed order ``log2(gap(n) / gap(2n))`` for each integrated system.

    A system's gap is the largest component gap, each scaled by that curve's
    magnitude. Each system uses the finest triple ``(n, 2n, 4n)`` on its
    ladder whose gaps still decrease and whose finest gap sits above its
    ``ROUNDOFF_FLOOR``; if none qualifies, the triple is empty and the order
    is reported as unobservable.
    """
    cache = {}

    def gaps_at(n):
        if n not in cache:
            cache[n] = oracle_gaps(sol, n, window, backend)
        return cache[n]

    t_probe = np.linspace(0, sol.params.T * (1 - window), 101)
    scale = {name: max(1.0, float(np.max(np.abs(ref(sol, t_probe))))) for name, ref in _REFERENCES.items()}
    out = {}
    for system, (names, singular) in SYSTEMS.items():
        ladder = SINGULAR_LADDER if singular else SMOOTH_LADDER
        chosen = ConvergenceOrder(system, (), (), ())
        for k in range(len(ladder) - 3, -1, -1):
            trio = ladder[k:k + 3]
            gaps = tuple(max(gaps_at(n)[name] / scale[name] for name in names) for n in trio)
            if gaps[-1] >= ROUNDOFF_FLOOR[singular] and gaps[0] > gaps[1] > gaps[2]:
                orders = tuple(float(np.log2(gaps[j] / gaps[j + 1])) for j in range(2))
                chosen = ConvergenceOrder(system, trio, gaps, orders)
                break
        out[system] = chosen
    return out
