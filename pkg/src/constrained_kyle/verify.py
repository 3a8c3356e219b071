"""Deterministic invariant suite: HJB residuals, filtering identities, terminal facts, oracle agreement."""

from dataclasses import dataclass
import math

import numpy as np

from .closed_form import (
    filter_identity_residuals,
    hjb_residuals,
    r_of_t,
    sigma1_of_t,
)
from .oracle import ORACLE_WINDOW, convergence_orders, oracle_gaps

HJB_TOL = 1e-9
IDENTITY_TOL = 1e-12
TERMINAL_TOL = 1e-8
ORACLE_TOL = 1e-6
ORACLE_STEPS = 100_000
ORDER_BAND = (3.5, 4.5)
# the HJB grid stops this far (relative to T) short of the horizon
HJB_END = 1e-6


@dataclass(frozen=True)
class Check:
    group: str
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""


def _max_abs(x):
    return float(np.max(np.abs(x)))


def hjb_checks(sol, n_grid=1000, tol=HJB_TOL, j_scale=1.0):
    T = sol.params.T
    t = np.linspace(0.0, T * (1 - HJB_END), n_grid)
    return [Check("hjb", name, v := _max_abs(res), tol, v <= tol)
            for name, res in hjb_residuals(sol, t, j_scale).items()]


def identity_checks(sol, n_grid=1000, tol=IDENTITY_TOL):
    T = sol.params.T
    t = np.linspace(0.0, T * (1 - HJB_END), n_grid)
    return [Check("identity", name, v := _max_abs(res), tol, v <= tol)
            for name, res in filter_identity_residuals(sol, t).items()]


def terminal_checks(sol, tol=TERMINAL_TOL):
    p = sol.params
    r_T = abs(float(r_of_t(sol, p.T)))
    s1_T = abs(float(sigma1_of_t(sol, p.T))) / p.sigma_a**2
    return [
        Check("terminal", "r(T)", r_T, tol, r_T <= tol),
        Check("terminal", "sigma1(T)/sigma_a^2", s1_T, tol, s1_T <= tol),
    ]


def oracle_checks(sol, n_steps=ORACLE_STEPS, tol=ORACLE_TOL, window=ORACLE_WINDOW, backend=None):
    gaps = oracle_gaps(sol, n_steps, window, backend)
    return [Check("oracle", name, gap, tol, gap <= tol) for name, gap in gaps.items()]


def order_checks(sol, band=ORDER_BAND, window=ORACLE_WINDOW, backend=None):
    out = []
    for system, conv in convergence_orders(sol, window, backend).items():
        if not conv.observable:
            out.append(Check("order", system, math.nan, band[0], True,
                             "gap at round-off on the whole ladder; order unobservable"))
            continue
        worst = max(conv.orders, key=lambda q: abs(q - 4.0))
        ok = all(band[0] <= q <= band[1] for q in conv.orders)
        out.append(Check("order", system, worst, band[0], ok,
                         f"band [{band[0]}, {band[1]}], steps {conv.steps}"))
    return out


def run_suite(sol, n_grid=1000, oracle_steps=ORACLE_STEPS, j_scale=1.0, backend=None):
    """Every deterministic check, in a fixed order."""
    return (
        hjb_checks(sol, n_grid, j_scale=j_scale)
        + identity_checks(sol, n_grid)
        + terminal_checks(sol)
        + oracle_checks(sol, oracle_steps, backend=backend)
        + order_checks(sol, backend=backend)
    )
