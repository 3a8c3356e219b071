"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict through the ``acceptance`` fixture;
the lines are repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from constrained_kyle import ModelParams, build_solution, calibrate_r0
from constrained_kyle import analysis as an
from constrained_kyle import cli
from constrained_kyle import closed_form as cf
from constrained_kyle import verify
from constrained_kyle.calibrate import sample_grid
from constrained_kyle.oracle import integrate_sigma3
from constrained_kyle.simulate import SimConfig, run_batch

from conftest import TAU_ONE

N_PATHS = 100_000
SEED = 42
FILTER_MOMENTS = ("sigma1", "sigma2", "sigma3", "sigma4", "QX")
LAGS = cli.AUTOCORR_LAGS


def mc_config(sol, n_steps):
    T = sol.params.T
    return SimConfig(
        n_paths=N_PATHS,
        n_steps=n_steps,
        seed=SEED,
        checkpoint_times=tuple(f * T for f in (0.25, 0.5, 0.75)),
        increments=tuple((0.5 * T, T / k) for k in LAGS),
        workers=1,
    )


@pytest.fixture(scope="module")
def mc(sol):
    """The criterion-6 run: timed, single-threaded."""
    start = time.perf_counter()
    batch = run_batch(sol, mc_config(sol, 2000))
    elapsed = time.perf_counter() - start
    return batch, elapsed


@pytest.fixture(scope="module")
def s3_curve(sol):
    return integrate_sigma3(sol, 2000)


def report_bytes(batch, sol, s3, tmp_path, tag):
    rows = list(an.compare_moments(batch, sol, s3).rows)
    rows += [an.insider_value_row(batch, sol), an.block_fraction_row(batch, sol)]
    trend = an.autocorrelation_trend(batch, sol, s3, 0.5 * sol.params.T, [sol.params.T / k for k in LAGS])
    an.write_moment_csv(tmp_path / f"moments_{tag}.csv", rows)
    an.write_autocorr_csv(tmp_path / f"autocorr_{tag}.csv", trend)
    return (tmp_path / f"moments_{tag}.csv").read_bytes() + (tmp_path / f"autocorr_{tag}.csv").read_bytes()


def test_criterion_1_calibration_closed_loop(acceptance):
    params = ModelParams(sigma_w=1.0, sigma_a=1.0, sigma_v=1.0, rho=0.3, T=TAU_ONE)
    start = time.perf_counter()
    r0 = calibrate_r0(params).r0
    elapsed = time.perf_counter() - start
    ok = abs(r0 - 1.0) <= 1e-10 and elapsed < 1.0
    assert acceptance(1, ok, f"|r0 - 1| = {abs(r0 - 1):.1e} (tol 1e-10), {elapsed:.3f} s (< 1 s)")


def test_criterion_2_boundary_conditions(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_r, worst_s1 = 0.0, 0.0
    for _ in range(20):
        sw, sa, sv = rng.uniform(0.2, 5.0, size=3)
        rho = 1.0 - rng.uniform(0.0, 1.0)  # (0, 1]
        T = rng.uniform(0.1, 5.0)
        sol = build_solution(ModelParams(sw, sa, sv, rho, T))
        worst_r = max(worst_r, abs(float(cf.r_of_t(sol, T))))
        worst_s1 = max(worst_s1, abs(float(cf.sigma1_of_t(sol, T))) / sa**2)
    elapsed = time.perf_counter() - start
    ok = worst_r <= 1e-8 and worst_s1 <= 1e-8 and elapsed < 10.0
    assert acceptance(2, ok, f"max |r(T)| = {worst_r:.1e}, max |Sigma1(T)|/sigma_a^2 = {worst_s1:.1e} "
                             f"(tol 1e-8), {elapsed:.2f} s (< 10 s)")


def test_criterion_3_oracle_equivalence(sol, acceptance):
    start = time.perf_counter()
    gaps = verify.oracle_checks(sol, n_steps=100_000)
    orders = verify.order_checks(sol)
    elapsed = time.perf_counter() - start
    worst = max(gaps, key=lambda c: c.value)
    observed = [c for c in orders if math.isfinite(c.value)]
    ok = all(c.passed for c in gaps + orders) and len(observed) == len(orders) and elapsed < 30.0
    order_text = ", ".join(f"{c.name} {c.value:.2f}" for c in orders)
    assert acceptance(3, ok, f"sup gap {worst.value:.1e} ({worst.name}) at 1e5 steps (tol 1e-6); "
                             f"orders {order_text} (band 3.5-4.5); {elapsed:.1f} s (< 30 s)")


def test_criterion_4_hjb_residuals(sol, acceptance):
    start = time.perf_counter()
    checks = verify.hjb_checks(sol, n_grid=1000, tol=1e-9)
    elapsed = time.perf_counter() - start
    worst = max(c.value for c in checks)
    ok = len(checks) == 5 and all(c.passed for c in checks) and elapsed < 1.0
    assert acceptance(4, ok, f"max residual {worst:.1e} over 5 equations (tol 1e-9), {elapsed:.3f} s (< 1 s)")


def test_criterion_5_filter_identities(sol, acceptance):
    start = time.perf_counter()
    checks = verify.identity_checks(sol, n_grid=1000, tol=1e-12)
    elapsed = time.perf_counter() - start
    worst = max(c.value for c in checks)
    ok = len(checks) == 4 and all(c.passed for c in checks) and elapsed < 1.0
    assert acceptance(5, ok, f"max relative residual {worst:.1e} over 4 identities (tol 1e-12), "
                             f"{elapsed:.3f} s (< 1 s)")


@pytest.mark.slow
def test_criterion_6_filter_consistency(sol, mc, s3_curve, acceptance):
    batch, elapsed = mc
    report = an.compare_moments(batch, sol, s3_curve)
    rows = [r for r in report.rows if r.moment in FILTER_MOMENTS]
    worst = max(rows, key=lambda r: abs(r.z))

    coarse = run_batch(sol, mc_config(sol, 1000))
    fine_t, coarse_t = an.terminal_diagnostics(batch), an.terminal_diagnostics(coarse)
    x_ratio = coarse_t.x_sq / fine_t.x_sq
    jump_ratio = coarse_t.jump_sq / fine_t.jump_sq

    ok = (len(rows) == 15 and all(r.passed for r in rows)
          and x_ratio >= 2.0 and jump_ratio >= 2.0 and elapsed < 300.0)
    assert acceptance(6, ok, f"max |z| {abs(worst.z):.2f} ({worst.moment} at t={worst.checkpoint:g}) over 15 rows; "
                             f"E[X_T-^2] shrinks {x_ratio:.1f}x, E[dP_T^2] {jump_ratio:.1f}x (>= 2x); "
                             f"{elapsed:.1f} s single-threaded (< 300 s)")


@pytest.mark.slow
def test_criterion_7_insider_value(sol, mc, acceptance):
    batch, _ = mc
    row = an.insider_value_row(batch, sol)
    assert acceptance(7, row.passed, f"MC {row.estimate:.5f} +- {row.stderr:.5f} vs {row.target:.5f}, "
                                     f"z = {row.z:.2f} (|z| <= 3)")


@pytest.mark.slow
def test_criterion_8_qualitative_properties(sol, sol_unit, mc, s3_curve, fig_params, acceptance):
    batch, _ = mc
    T = sol.params.T
    parts = {}

    grid = sample_grid(sol, 1001)
    parts["a"] = bool(np.all(np.diff(grid.lam) < 0))

    t = np.linspace(0.0, T, 1001)
    u_ok = []
    for sa in cli.FIGURE_SIGMA_A:
        s = build_solution(fig_params.replace(sigma_a=sa))
        u_ok.append(an.detect_u_shape(cf.fprime_of_t(s, t), t).is_u)
    parts["b"] = all(u_ok)

    frac = cf.block_fraction(sol)
    block = an.block_fraction_row(batch, sol)
    unit = cf.block_fraction(sol_unit)
    parts["c"] = (0.0 < frac < 1.0 and block.passed
                  and math.isclose(unit, (math.sqrt(3) - 1) / 3, rel_tol=1e-12))

    target_curve = cf.scaled_autocorrelation_curve(sol, s3_curve.grid, s3_curve.values[:, 0])
    trend = an.autocorrelation_trend(batch, sol, s3_curve, 0.5 * T, [T / k for k in LAGS])
    z_mid = trend.single_lag_z(T / 200)
    parts["d"] = bool(np.all(target_curve > 0)) and trend.passed and abs(z_mid) <= an.Z_LIMIT

    rp = sol.params
    rem_T = float(cf.remaining_variance(sol, T))
    formula = rp.rho**2 * rp.sigma_v**2 * math.sqrt(1 + 2 * sol.r0) / (1 + sol.r0) ** 2
    start = [float(cf.remaining_variance(build_solution(fig_params.replace(sigma_a=sa)), 0.0))
             for sa in cli.FIGURE_SIGMA_A]
    parts["e"] = (rem_T > 0 and math.isclose(rem_T, formula, rel_tol=1e-12)
                  and all(math.isclose(v, 0.09, rel_tol=1e-14) for v in start))

    ok = all(parts.values())
    flags = " ".join(f"({k}) {'ok' if v else 'FAIL'}" for k, v in parts.items())
    assert acceptance(8, ok, f"{flags}; block {block.estimate:.4f} vs {block.target:.4f} (z {block.z:.2f}); "
                             f"autocorr limit {trend.intercept:.3f} +- {trend.intercept_se:.3f} "
                             f"vs {trend.target:.4f} (z {trend.z:.2f}), h=T/200 z {z_mid:.2f}")


def test_criterion_9_figures(tmp_path, capsys, acceptance):
    start = time.perf_counter()
    code = cli.main(["figures", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    capsys.readouterr()
    files = sorted(p.name for p in tmp_path.glob("fig1*.csv"))
    shapes = json.loads((tmp_path / "shapes.json").read_text())
    ok = code == cli.EXIT_OK and files == ["fig1A.csv", "fig1B.csv", "fig1C.csv", "fig1D.csv"] \
        and len(shapes) == 16 and all(shapes.values()) and elapsed < 30.0
    assert acceptance(9, ok, f"{sum(shapes.values())}/{len(shapes)} shape and ordering checks, "
                             f"exit {code}, {elapsed:.2f} s (< 30 s)")


@pytest.mark.slow
def test_criterion_10_determinism(sol, mc, s3_curve, tmp_path, acceptance):
    batch, _ = mc
    repeat = run_batch(sol, mc_config(sol, 2000))
    first = report_bytes(batch, sol, s3_curve, tmp_path, "first")
    second = report_bytes(repeat, sol, s3_curve, tmp_path, "second")
    ok = first == second
    assert acceptance(10, ok, f"report files {'byte-identical' if ok else 'DIFFER'} across two seed-{SEED} runs "
                              f"({len(first)} bytes)")
