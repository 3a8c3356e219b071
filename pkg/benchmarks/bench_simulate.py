"""Compare the numba and pure-numpy Euler-Maruyama kernels.

Two timings per backend: the path kernel alone on pre-drawn increments,
and a full ``run_batch`` (which also pays for the per-path Philox draws).

    python3 benchmarks/bench_simulate.py --paths 20000 --steps 2000
"""

import argparse
import json
import time

import numpy as np

from constrained_kyle import _kernels
from constrained_kyle.calibrate import build_solution
from constrained_kyle.closed_form import ModelParams
from constrained_kyle.simulate import SimConfig, coefficient_table, record_layout, run_batch


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="print one JSON object instead of a table")
    args = ap.parse_args(argv)

    sol = build_solution(ModelParams())
    cfg = SimConfig(n_paths=args.paths, n_steps=args.steps, checkpoint_times=(0.25, 0.5, 0.75))
    coef = coefficient_table(sol, args.steps)
    rec = record_layout(sol.params, cfg).record_idx
    dt = sol.params.T / args.steps
    rng = np.random.default_rng(0)
    a = rng.standard_normal(args.paths)
    dw = rng.standard_normal((args.paths, args.steps)) * np.sqrt(dt)

    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    results = {}
    outputs = {}
    for b in backends:
        # warm-up also triggers JIT compilation
        outputs[b] = _kernels.em_paths(coef, a[:8], dw[:8], dt, 1.0, rec, b)
        kernel = best_of(lambda: _kernels.em_paths(coef, a, dw, dt, 1.0, rec, b), args.repeats)
        full = best_of(lambda: run_batch(sol, SimConfig(n_paths=args.paths, n_steps=args.steps,
                                                        checkpoint_times=(0.25, 0.5, 0.75), backend=b)), 1)
        results[b] = {"kernel_s": kernel, "run_batch_s": full}

    same = None
    if len(backends) == 2:
        x = _kernels.em_paths(coef, a, dw, dt, 1.0, rec, "numpy")
        y = _kernels.em_paths(coef, a, dw, dt, 1.0, rec, "numba")
        same = all(np.array_equal(u, w) for u, w in zip(x, y))

    if args.json:
        print(json.dumps({"paths": args.paths, "steps": args.steps, "results": results, "bitwise_equal": same}))
        return
    print(f"{args.paths} paths x {args.steps} steps (best of {args.repeats})")
    print(f"{'backend':<8} {'kernel [s]':>11} {'run_batch [s]':>14}")
    for b, r in results.items():
        print(f"{b:<8} {r['kernel_s']:>11.3f} {r['run_batch_s']:>14.3f}")
    if len(backends) == 2:
        print(f"kernel speed-up: {results['numpy']['kernel_s'] / results['numba']['kernel_s']:.1f}x; "
              f"outputs bitwise equal: {same}")


if __name__ == "__main__":
    main()
