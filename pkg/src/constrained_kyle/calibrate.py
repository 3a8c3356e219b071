"""Calibration of ``r0`` from the horizon and assembly of solutions."""

from dataclasses import dataclass
import math

import numpy as np

from .closed_form import (
    DomainError,
    EquilibriumSolution,
    coefficients_at,
    f_of_t,
    fprime_of_t,
    g_of_t,
    K_of_t,
    r_of_t,
    remaining_variance,
    sigma1_of_t,
    sigma2_of_t,
    sigma4_of_t,
    tau,
    tau_prime,
)

MAX_BRACKET_STEPS = 200
MAX_ITERATIONS = 200


class CalibrationError(RuntimeError):
    """No root of ``tau(r0) = T`` could be bracketed or refined."""


@dataclass(frozen=True)
class CalibrationResult:
    r0: float
    residual: float
    iterations: int
    bracket: tuple


def _excess(x, params):
    return tau(x, params) - params.T


def _find_bracket(params):
    # tau(0+) = inf and tau(inf) = 0, so walk geometrically away from x = 1
    # in the direction the sign points to.
    x = 1.0
    fx = _excess(x, params)
    if fx == 0:
        return x, x, fx, fx
    factor = 2.0 if fx > 0 else 0.5
    for _ in range(MAX_BRACKET_STEPS):
        y = x * factor
        if not (math.isfinite(y) and y > 0):
            break
        try:
            fy = _excess(y, params)
        except (DomainError, FloatingPointError, OverflowError):
            break
        if not math.isfinite(fy):
            break
        if fy == 0 or (fy > 0) != (fx > 0):
            lo, hi = (x, y) if x < y else (y, x)
            f_lo, f_hi = (fx, fy) if x < y else (fy, fx)
            return lo, hi, f_lo, f_hi
        x, fx = y, fy
    raise CalibrationError(
        f"could not bracket tau(r0) = T within {MAX_BRACKET_STEPS} doublings/halvings "
        f"(params={params.as_dict()})"
    )


def calibrate_r0(params):
    """Solve ``tau(r0) = T`` for ``r0 > 0``.

    Bisection narrows the bracket to a relative width of 1e-8, then Newton
    steps with the analytic ``tau'`` polish the root; any Newton step that
    leaves the bracket is replaced by a bisection step.
    """
    tol = 1e-12 * max(1.0, params.T)
    try:
        _excess(1.0, params)
    except OverflowError as exc:
        raise CalibrationError(f"tau overflows for params={params.as_dict()}") from exc
    lo, hi, f_lo, f_hi = _find_bracket(params)
    if f_lo == 0:
        return CalibrationResult(lo, 0.0, 0, (lo, lo))
    if f_hi == 0:
        return CalibrationResult(hi, 0.0, 0, (hi, hi))

    iterations = 0
    while hi - lo > 1e-8 * hi and iterations < MAX_ITERATIONS:
        mid = 0.5 * (lo + hi)
        f_mid = _excess(mid, params)
        iterations += 1
        if f_mid == 0:
            return CalibrationResult(mid, 0.0, iterations, (lo, hi))
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid

    x = 0.5 * (lo + hi)
    fx = _excess(x, params)
    best_x, best_f = x, fx
    while iterations < MAX_ITERATIONS:
        iterations += 1
        if (fx > 0) == (f_lo > 0):
            lo, f_lo = x, fx
        else:
            hi, f_hi = x, fx
        if abs(fx) <= tol:
            break
        slope = float(tau_prime(x, params))
        x_new = x - fx / slope if slope != 0 else math.nan
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if x_new == x:
            break
        x = x_new
        fx = _excess(x, params)
        if abs(fx) < abs(best_f):
            best_x, best_f = x, fx

    residual = abs(best_f)
    if residual > tol:
        raise CalibrationError(
            f"calibration stalled at r0={best_x!r} with |tau(r0) - T| = {residual:.3e} > {tol:.1e}"
        )
    return CalibrationResult(best_x, residual, iterations, (lo, hi))


def build_solution(params):
    """Calibrate ``r0`` and return the immutable equilibrium."""
    result = calibrate_r0(params)
    return EquilibriumSolution(params, result.r0)


@dataclass(frozen=True)
class CoefficientGrid:
    """Coefficient curves sampled on ``t_i = i T / (n - 1)``.

    ``beta`` is ``nan`` in the last slot (``beta_defined`` is False there).
    """

    t: np.ndarray
    r: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    sigma4: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    beta: np.ndarray
    beta_defined: np.ndarray
    s: np.ndarray
    alpha: np.ndarray
    J: np.ndarray
    K: np.ndarray
    f: np.ndarray
    g: np.ndarray
    fprime: np.ndarray
    remaining_variance: np.ndarray


def sample_grid(sol, n):
    if n < 2:
        raise ValueError("a coefficient grid needs n >= 2 points")
    T = sol.params.T
    t = np.arange(n) * (T / (n - 1))
    t[-1] = T
    coef = coefficients_at(sol, t, include_beta=False)
    beta = np.full(n, np.nan)
    beta[:-1] = coefficients_at(sol, t[:-1]).beta
    defined = np.ones(n, dtype=bool)
    defined[-1] = False
    return CoefficientGrid(
        t=t,
        r=r_of_t(sol, t),
        sigma1=sigma1_of_t(sol, t),
        sigma2=sigma2_of_t(sol, t),
        sigma4=sigma4_of_t(sol, t),
        lam=coef.lam,
        mu=coef.mu,
        beta=beta,
        beta_defined=defined,
        s=coef.s,
        alpha=coef.alpha,
        J=coef.J,
        K=K_of_t(sol, t),
        f=f_of_t(sol, t),
        g=g_of_t(sol, t),
        fprime=fprime_of_t(sol, t),
        remaining_variance=remaining_variance(sol, t),
    )

