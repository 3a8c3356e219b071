"""Command-line front end.

Exit codes: 0 ok, 2 usage or invalid parameters, 3 calibration failure,
4 I/O error, 5 a verification or moment check failed.
"""

import argparse
import csv
from dataclasses import asdict, dataclass, field
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .analysis import (
    autocorrelation_trend,
    block_fraction_row,
    check_figure_shapes,
    compare_moments,
    figure_series,
    fmt,
    insider_value_row,
    terminal_diagnostics,
    write_autocorr_csv,
    write_figure_csv,
    write_moment_csv,
)
from .calibrate import CalibrationError, calibrate_r0, sample_grid
from .closed_form import DomainError, EquilibriumSolution, ModelParams
from .oracle import MIN_STEPS, integrate_sigma3
from .simulate import SimConfig, SimulationError, coefficient_table, run_batch
from . import verify

EXIT_OK, EXIT_USAGE, EXIT_CALIBRATION, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4, 5

FIGURE_SIGMA_A = (5.0, 3.0, 1.0)
DEFAULT_CHECKPOINTS = (0.25, 0.5, 0.75)  # fractions of T
AUTOCORR_LAGS = (100, 200, 400)  # h = T / k
SIGMA3_MIN_STEPS = 2000

CURVE_COLUMNS = ("t", "r", "Sigma1", "Sigma2", "Sigma3", "Sigma4", "lambda", "mu", "beta", "s",
                 "alpha", "J", "K", "f", "g", "fprime", "remaining_variance")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Fully resolved inputs of one command; written as ``config.json``."""

    command: str
    params: dict
    sim: dict = None
    options: dict = field(default_factory=dict)
    out: str = None
    format: str = "csv"
    version: str = __version__

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _params(args):
    try:
        return ModelParams(sigma_w=args.sigma_w, sigma_a=args.sigma_a, sigma_v=args.sigma_v, rho=args.rho, T=args.T)
    except DomainError as exc:
        raise CliError(f"invalid parameters: {exc}", EXIT_USAGE) from exc


def _solve(params):
    try:
        result = calibrate_r0(params)
    except CalibrationError as exc:
        raise CliError(f"calibration failed: {exc}", EXIT_CALIBRATION) from exc
    return result, EquilibriumSolution(params, result.r0)


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path!r}: {exc}", EXIT_IO) from exc
    return path


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2) + "\n")


def _echo_config(out, config):
    _write_text(os.path.join(out, "config.json"), config.to_json())


def _checkpoints(text, T):
    if text is None:
        return tuple(f * T for f in DEFAULT_CHECKPOINTS)
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise CliError(f"--checkpoints expects comma-separated numbers, got {text!r}", EXIT_USAGE) from exc


def _sigma3_curve(sol, n_steps):
    # a multiple of the simulation grid keeps every checkpoint on a node
    k = max(1, math.ceil(max(SIGMA3_MIN_STEPS, MIN_STEPS) / n_steps))
    return integrate_sigma3(sol, n_steps * k)


def _print_checks(rows, stream=None):
    stream = sys.stdout if stream is None else stream
    for row in rows:
        status = "PASS" if row.passed else "FAIL"
        note = f"  ({row.note})" if row.note else ""
        print(f"{status}  {row.group:<9} {row.name:<22} {row.value:<12.3e} tol {row.tol:.1e}{note}", file=stream)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_calibrate(args):
    params = _params(args)
    result, sol = _solve(params)
    record = {
        "r0": result.r0,
        "I": sol.I,
        "residual": result.residual,
        "iterations": result.iterations,
        "bracket": list(result.bracket),
    }
    if args.format == "json":
        print(json.dumps(record, indent=2))
    else:
        for key, value in record.items():
            shown = ",".join(fmt(v) for v in value) if isinstance(value, list) else (
                str(value) if isinstance(value, int) else fmt(value))
            print(f"{key},{shown}")
    if args.out:
        out = _prepare_out(args.out)
        _write_json(os.path.join(out, "calibration.json"), record)
        _echo_config(out, RunConfig("calibrate", params.as_dict(), out=out, format=args.format))
    return EXIT_OK


def cmd_curves(args):
    params = _params(args)
    _, sol = _solve(params)
    n = args.grid
    if n < 2:
        raise CliError("--grid must be >= 2", EXIT_USAGE)
    grid = sample_grid(sol, n)
    k = max(1, math.ceil(10_000 / (n - 1)))
    sigma3 = integrate_sigma3(sol, (n - 1) * k).values[::k, 0]
    cols = [grid.t, grid.r, grid.sigma1, grid.sigma2, sigma3, grid.sigma4, grid.lam, grid.mu, grid.beta,
            grid.s, grid.alpha, grid.J, grid.K, grid.f, grid.g, grid.fprime, grid.remaining_variance]
    out = _prepare_out(args.out)
    config = RunConfig("curves", params.as_dict(), options={"grid": n, "sigma3_steps": (n - 1) * k},
                       out=out, format=args.format)
    if args.format == "json":
        _write_json(os.path.join(out, "curves.json"),
                    {name: [None if math.isnan(x) else float(x) for x in col] for name, col in zip(CURVE_COLUMNS, cols)})
    else:
        with open(os.path.join(out, "curves.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for i in range(n):
                w.writerow([fmt(c[i]) for c in cols])
    _echo_config(out, config)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def _sim_config(args, params):
    T = params.T
    mid = 0.5 * T
    try:
        return SimConfig(
            n_paths=args.paths,
            n_steps=args.steps,
            seed=args.seed,
            checkpoint_times=_checkpoints(args.checkpoints, T),
            increments=tuple((mid, T / k) for k in AUTOCORR_LAGS),
            chunk_size=args.chunk_size,
            workers=args.workers,
            backend=None if args.backend == "auto" else args.backend,
        )
    except ValueError as exc:
        raise CliError(f"invalid simulation flags: {exc}", EXIT_USAGE) from exc


def _dump_paths(path, batch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "t", "theta", "Q", "P", "Y"))
        for k, t in enumerate(batch.checkpoint_times):
            theta, q, price, y = batch.at_checkpoint(k)
            for i in range(theta.size):
                w.writerow([i, fmt(t), fmt(theta[i]), fmt(q[i]), fmt(price[i]), fmt(y[i])])


def cmd_simulate(args):
    params = _params(args)
    _, sol = _solve(params)
    config = _sim_config(args, params)
    coef = None
    if args.perturb_lambda != 1.0:
        coef = coefficient_table(sol, config.n_steps)
        coef[4] *= args.perturb_lambda
    try:
        batch = run_batch(sol, config, coefficients=coef)
    except ValueError as exc:
        raise CliError(f"invalid simulation flags: {exc}", EXIT_USAGE) from exc
    except SimulationError as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_CHECK) from exc

    s3 = _sigma3_curve(sol, config.n_steps)
    report = compare_moments(batch, sol, s3)
    rows = list(report.rows) + [insider_value_row(batch, sol), block_fraction_row(batch, sol)]
    trend = autocorrelation_trend(batch, sol, s3, 0.5 * params.T, [params.T / k for k in AUTOCORR_LAGS])
    term = terminal_diagnostics(batch)

    out = _prepare_out(args.out)
    options = {"perturb_lambda": args.perturb_lambda} if args.perturb_lambda != 1.0 else {}
    run = RunConfig("simulate", params.as_dict(), sim=config.as_dict(), options=options, out=out, format=args.format)
    terminal = {"E[X_T-^2]": term.x_sq, "stderr_X": term.x_sq_se,
                "E[dP_T^2]": term.jump_sq, "stderr_dP": term.jump_sq_se}
    if args.format == "json":
        _write_json(os.path.join(out, "moments.json"), [asdict(r) for r in rows])
        _write_json(os.path.join(out, "autocorrelation.json"),
                    {"estimates": [asdict(e) for e in trend.estimates], "intercept": trend.intercept,
                     "intercept_stderr": trend.intercept_se, "target": trend.target, "z": trend.z})
    else:
        write_moment_csv(os.path.join(out, "moments.csv"), rows)
        write_autocorr_csv(os.path.join(out, "autocorrelation.csv"), trend)
    _write_json(os.path.join(out, "terminal.json"), terminal)
    if args.dump_paths:
        _dump_paths(os.path.join(out, "paths.csv"), batch)
    _echo_config(out, run)

    failed = [r for r in rows if not r.passed]
    for r in rows:
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} t={r.checkpoint:<7.4g} {r.moment:<15} est {r.estimate: .6g} se {r.stderr:.3g} "
              f"target {r.target: .6g} z {r.z: .2f}")
    print(f"{'ok  ' if trend.passed else 'FAIL'} autocorrelation limit at t={trend.t:g}: "
          f"{trend.intercept:.4g} +- {trend.intercept_se:.3g} vs {trend.target:.4g} (z {trend.z:.2f})")
    print(f"terminal: E[X_T-^2] {term.x_sq:.3e}, E[dP_T^2] {term.jump_sq:.3e}")
    return EXIT_OK if not failed and trend.passed else EXIT_CHECK


def cmd_figures(args):
    base = _params(args)
    try:
        series = figure_series(base, list(FIGURE_SIGMA_A), args.grid)
    except CalibrationError as exc:
        raise CliError(f"calibration failed: {exc}", EXIT_CALIBRATION) from exc
    out = _prepare_out(args.out)
    for s in series:
        write_figure_csv(os.path.join(out, f"fig{s.figure}.csv"), s)
    checks = check_figure_shapes(series)
    _write_json(os.path.join(out, "shapes.json"), checks)
    _echo_config(out, RunConfig("figures", base.as_dict(),
                                options={"grid": args.grid, "sigma_a": list(FIGURE_SIGMA_A)}, out=out))
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def cmd_verify(args):
    params = _params(args)
    _, sol = _solve(params)
    checks = verify.run_suite(sol, n_grid=args.grid, oracle_steps=args.oracle_steps, j_scale=args.perturb_j,
                              backend=None if args.backend == "auto" else args.backend)
    _print_checks(checks)
    if args.out:
        out = _prepare_out(args.out)
        rows = [{"group": c.group, "name": c.name, "value": c.value, "tol": c.tol, "passed": c.passed, "note": c.note}
                for c in checks]
        if args.format == "json":
            _write_json(os.path.join(out, "verify.json"), rows)
        else:
            with open(os.path.join(out, "verify.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("group", "name", "value", "tol", "passed", "note"))
                for r in rows:
                    w.writerow([r["group"], r["name"], fmt(r["value"]), fmt(r["tol"]), int(r["passed"]), r["note"]])
        options = {"grid": args.grid, "oracle_steps": args.oracle_steps}
        if args.perturb_j != 1.0:
            options["perturb_j"] = args.perturb_j
        _echo_config(out, RunConfig("verify", params.as_dict(), options=options, out=out, format=args.format))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_CHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _model_flags(p):
    g = p.add_argument_group("model parameters (defaults: figure parameters, sigma_a = 1)")
    g.add_argument("--sigma-w", type=float, default=1.0, help="noise-trader volatility")
    g.add_argument("--sigma-a", type=float, default=1.0, help="std dev of the insider's target")
    g.add_argument("--sigma-v", type=float, default=1.0, help="std dev of the asset value")
    g.add_argument("--rho", type=float, default=0.3, help="correlation of target and value, in (0, 1]")
    g.add_argument("--T", type=float, default=1.0, help="trading horizon")


def build_parser():
    parser = argparse.ArgumentParser(prog="constrained-kyle",
                                     description="Kyle-type equilibrium with a terminal holdings target.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="solve for r0 and print (r0, I, residual)")
    _model_flags(p)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None, help="also write calibration.json and config.json here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("curves", help="export the coefficient curves on a uniform grid")
    _model_flags(p)
    p.add_argument("--grid", type=int, default=1001, help="number of grid points on [0, T]")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("simulate", help="Monte Carlo filter-consistency report")
    _model_flags(p)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--checkpoints", default=None, help="comma-separated times (default 0.25T,0.5T,0.75T)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--chunk-size", type=int, default=2048)
    p.add_argument("--backend", choices=("auto", "numba", "numpy"), default="auto")
    p.add_argument("--dump-paths", action="store_true", help="write paths.csv (one row per path and checkpoint)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default="out")
    p.add_argument("--perturb-lambda", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("figures", help="write fig1A.csv ... fig1D.csv for sigma_a in {5, 3, 1}")
    _model_flags(p)
    p.add_argument("--grid", type=int, default=1001)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_figures, format="csv")

    p = sub.add_parser("verify", help="run the deterministic invariant suite")
    _model_flags(p)
    p.add_argument("--grid", type=int, default=1000, help="points for the HJB and identity grids")
    p.add_argument("--oracle-steps", type=int, default=verify.ORACLE_STEPS)
    p.add_argument("--backend", choices=("auto", "numba", "numpy"), default="auto")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None)
    p.add_argument("--perturb-j", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
