"""Timing comparison of the compiled and pure-Python tape backends.

Runs the hot kernels on the corridor transcription tape: plain replay,
forward Jacobian, reverse-mode weighted gradient, plus one full cold solve.
Backend selection happens at import time via the ``EMSMPC_PURE_TAPE``
environment variable, so this script re-executes itself once with the
variable set and prints both columns.

Usage: python3 benchmarks/compare_backends.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def bench(repeat: int) -> dict:
    from emsmpc.autodiff import backend_name
    from emsmpc.corridor import (CaseParams, DEFAULT_SOLVER_CONFIG,
                                 build_case_spec, cold_start_guess)
    from emsmpc.scenario import build_layout, transcribe
    from emsmpc.solver import solve

    p = CaseParams()
    x0 = np.array(p.x_init)
    spec = build_case_spec(p, "multistage_K0", x0)
    lay = build_layout(spec)
    tr = transcribe(spec, x0)
    z = cold_start_guess(p, lay, x0)
    w = np.linspace(-1.0, 1.0, tr.problem.n_res)
    # distinct evaluation points so per-point result caching cannot hide work
    rng = np.random.default_rng(0)
    points = [z + 0.01 * rng.normal(size=lay.dim) for _ in range(64)]

    def timeit(fn, n):
        fn(points[-1])  # warm up
        t0 = time.perf_counter()
        for i in range(n):
            fn(points[i % len(points)])
        return (time.perf_counter() - t0) / n

    out = {"backend": backend_name(),
           "dim": lay.dim, "n_res": tr.problem.n_res}
    out["values_ms"] = 1e3 * timeit(lambda zz: tr.problem.eval_values(zz),
                                    10 * repeat)
    out["jacobian_ms"] = 1e3 * timeit(lambda zz: tr.problem.eval_all(zz),
                                      repeat)
    out["vjp_ms"] = 1e3 * timeit(
        lambda zz: tr.problem.weighted_grad(zz, 1.0, w), 10 * repeat)

    t0 = time.perf_counter()
    res = solve(tr.problem, z, DEFAULT_SOLVER_CONFIG)
    out["cold_solve_s"] = time.perf_counter() - t0
    out["solve_status"] = res.status
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--emit-json", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.emit_json:
        print(json.dumps(bench(args.repeat)))
        return 0

    rows = [bench(args.repeat)]
    env = dict(os.environ, EMSMPC_PURE_TAPE="1")
    raw = subprocess.run(
        [sys.executable, os.path.abspath(__file__),
         "--repeat", str(max(1, args.repeat // 10)), "--emit-json"],
        env=env, capture_output=True, text=True, check=True)
    rows.append(json.loads(raw.stdout.strip().splitlines()[-1]))

    print(f"tape: {rows[0]['dim']} decisions, {rows[0]['n_res']} residuals")
    header = f"{'kernel':22s}" + "".join(f"{r['backend']:>14s}" for r in rows)
    print(header)
    print("-" * len(header))
    for key, label in (("values_ms", "replay values (ms)"),
                       ("jacobian_ms", "forward jacobian (ms)"),
                       ("vjp_ms", "weighted grad (ms)"),
                       ("cold_solve_s", "cold solve (s)")):
        line = f"{label:22s}"
        for r in rows:
            line += f"{r[key]:14.3f}"
        print(line)
    if rows[0]["backend"] == rows[1]["backend"]:
        print("note: compiled backend unavailable; both columns are pure")
    return 0


if __name__ == "__main__":
    sys.exit(main())
