"""Command-line front end: self-tests, open-loop export, closed-loop runs
and batch experiments.

Output formats are stable: CSV column orders are fixed (see the per-command
help text) and every JSON document carries a top-level ``"schema": 1``.
Commands never modify their inputs; all files land in the output directory
(``--out``, or the ``EMSMPC_OUT_DIR`` environment variable, default ``.``).

Exit codes: 0 on success, 1 on solver non-convergence or a safety violation,
2 on configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .autodiff import backend_name
from .corridor import (CONTROLLERS, CaseParams, RunRecord, batch_experiment,
                       closed_loop_run, continuous_dynamics,
                       open_loop_solution, rk4_step)
from .geometry import (Ellipsoid, Halfspace, SmoothingParams, SymPsdMatrix,
                       clamp_alpha, contains, loewner_john_cut, log_volume,
                       partition_pair, sample_in_cut, smooth_clamp_alpha)
from .solver import NlpProblem, SolverConfig, solve
from .tubes import LinearizedStep, propagate_shape

SCHEMA_VERSION = 1
OUT_DIR_ENV = "EMSMPC_OUT_DIR"


def _load_params(path: str | None) -> CaseParams:
    if path is None:
        return CaseParams()
    with open(path) as fh:
        data = json.load(fh)
    return CaseParams.from_dict(data)


def _out_dir(args) -> str:
    out = args.out or os.environ.get(OUT_DIR_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _controller_list(value: str) -> list:
    if value == "all":
        return list(CONTROLLERS)
    names = [v.strip() for v in value.split(",") if v.strip()]
    for n in names:
        if n not in CONTROLLERS:
            raise argparse.ArgumentTypeError(
                f"unknown controller {n!r}; choose from {', '.join(CONTROLLERS)}")
    return names


# ---------------------------------------------------------------------------
# selftest


class _Suite:
    """Collects named checks with their worst observed error."""

    def __init__(self, name: str):
        self.name = name
        self.checks = 0
        self.failures: list[str] = []
        self.max_err = 0.0

    def check(self, label: str, err: float, tol: float):
        self.checks += 1
        err = float(err)
        self.max_err = max(self.max_err, err)
        if not (err <= tol):
            self.failures.append(f"{label}: error {err:.3e} > tol {tol:.1e}")

    def require(self, label: str, ok: bool):
        self.checks += 1
        if not ok:
            self.failures.append(label)

    def report(self) -> bool:
        status = "pass" if not self.failures else "FAIL"
        print(f"[{status}] {self.name}: {self.checks} checks, "
              f"max error {self.max_err:.3e}")
        for f in self.failures:
            print(f"    {f}")
        return not self.failures


def _selftest_geometry() -> _Suite:
    s = _Suite("geometry")
    ell = Ellipsoid(SymPsdMatrix(np.eye(2)), np.zeros(2))
    hs = Halfspace(np.array([1.0, 0.0]), 0.0)
    half = loewner_john_cut(ell, hs)
    s.check("half-disk center", np.abs(half.center - [-1.0 / 3.0, 0]).max(),
            1e-12)
    s.check("half-disk shape",
            np.abs(half.shape.array - np.diag([4.0 / 9.0, 4.0 / 3.0])).max(),
            1e-12)
    tangent = loewner_john_cut(ell, Halfspace(np.array([1.0, 0.0]), -1.0))
    s.check("tangent center", np.abs(tangent.center - [-1.0, 0.0]).max(),
            1e-12)
    s.check("tangent shape", np.abs(tangent.shape.array).max(), 1e-12)
    shallow = loewner_john_cut(ell, Halfspace(np.array([1.0, 0.0]), 9.0))
    s.check("shallow cut is identity",
            np.abs(shallow.shape.array - ell.shape.array).max(), 0.0)

    rng = np.random.default_rng(7)
    misses = 0
    for trial in range(5):
        M = rng.normal(size=(2, 2))
        e = Ellipsoid(SymPsdMatrix(M @ M.T + 0.5 * np.eye(2)),
                      rng.normal(size=2))
        h = Halfspace(rng.normal(size=2), float(rng.normal()))
        try:
            enclosure = loewner_john_cut(e, h)
        except ValueError:
            continue
        for x in sample_in_cut(e, h, 2000, seed=trial):
            misses += not contains(enclosure, x, 1e-9)
    s.check("containment failures over sampled cuts", misses, 0.0)

    params = SmoothingParams()
    gap_bound = 2.0 * np.log(2.0) / params.beta
    worst_gap = 0.0
    sign = 1.0
    for a in np.linspace(-2.0, 2.0, 2001):
        smooth = smooth_clamp_alpha(float(a), 2, params)
        clamp = clamp_alpha(float(a), 2)
        gap = clamp - smooth
        worst_gap = max(worst_gap, gap)
        sign = min(sign, gap)
    s.check("smoothing gap upper bound", worst_gap, gap_bound)
    s.require("smoothed clamp stays below the exact clamp", sign >= -1e-12)
    return s


def _selftest_propagation() -> _Suite:
    s = _Suite("propagation")
    lin = LinearizedStep(A=np.zeros((2, 2)), B=np.zeros((2, 1)),
                         Gamma=np.eye(2))
    out = propagate_shape(SymPsdMatrix(np.zeros((2, 2))), lin, None, 1.0)
    s.check("pure disturbance injection", np.abs(out.array - np.eye(2)).max(),
            0.0)

    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    G = np.array([[0.1], [0.05]])
    P = SymPsdMatrix(np.diag([0.3, 0.1]))
    K = np.array([[0.1, -0.2]])
    stepped = propagate_shape(P, LinearizedStep(A=A, B=B, Gamma=G), K, 0.25)
    M = A + B @ K
    ref = M @ P.array @ M.T + 0.25 * (G @ G.T)
    s.check("closed-loop propagation formula",
            np.abs(stepped.array - ref).max(), 1e-14)

    p = CaseParams()
    f = continuous_dynamics(p)
    x = [0.0, 0.0, 0.3, 1.2, 0.4, 2.0, 0.1]
    u = [0.5, -0.3]
    w = [0.05, -0.02]

    def one_minus_two_halves(dt):
        coarse = np.array(rk4_step(f, x, u, w, dt))
        half = rk4_step(f, x, u, w, dt / 2.0)
        fine = np.array(rk4_step(f, half, u, w, dt / 2.0))
        return float(np.linalg.norm(coarse - fine))

    e1 = one_minus_two_halves(p.dt)
    e2 = one_minus_two_halves(p.dt / 2.0)
    ratio = e1 / e2
    s.require(f"rk4 order ratio {ratio:.1f} in [25, 40]", 25.0 <= ratio <= 40.0)

    ell = Ellipsoid(SymPsdMatrix(np.diag([2.0, 0.5])), np.array([1.0, -1.0]))
    h = Halfspace(np.array([0.0, 1.0]), -1.0)
    lo, hi = partition_pair(ell, h)
    s.require("partition log-volumes do not exceed the input",
              log_volume(lo) <= log_volume(ell) + 1e-12
              and log_volume(hi) <= log_volume(ell) + 1e-12)
    return s


def _selftest_solver() -> _Suite:
    s = _Suite("solver")
    cfg = SolverConfig(kkt_tol=1e-8, feas_tol=1e-10, rho0=10.0)

    prob = NlpProblem(
        dim=2, n_res=1,
        objective=lambda z: (z[0] - 2.0) ** 2 + (z[1] + 1.0) ** 2,
        residuals=lambda z: np.array([z[0] - 1.0]),
        gradient=lambda z: np.array([2 * (z[0] - 2.0), 2 * (z[1] + 1.0)]),
        jacobian=lambda z: np.array([[1.0, 0.0]]))
    res = solve(prob, np.zeros(2), cfg)
    s.check("active linear bound: distance to minimizer",
            np.abs(res.z - [1.0, -1.0]).max(), 1e-5)
    s.check("active linear bound: kkt", res.kkt.stationarity, 1e-6)

    prob2 = NlpProblem(
        dim=2, n_res=1,
        objective=lambda z: z[0] + z[1],
        residuals=lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0]),
        gradient=lambda z: np.ones(2),
        jacobian=lambda z: np.array([[2 * z[0], 2 * z[1]]]))
    res2 = solve(prob2, np.array([0.3, -0.2]), cfg)
    root = -np.sqrt(0.5)
    s.check("circle constraint: distance to minimizer",
            np.abs(res2.z - [root, root]).max(), 1e-5)
    s.check("circle constraint: kkt", res2.kkt.stationarity, 1e-6)
    return s


def run_selftest(args) -> int:
    print(f"emsmpc {__version__} selftest (tape backend: {backend_name()})")
    suites = [_selftest_geometry(), _selftest_propagation(),
              _selftest_solver()]
    ok = all(s.report() for s in suites)
    print("all suites passed" if ok else "selftest FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# openloop


def _tree_document(p: CaseParams, name: str, sol, res) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "controller": name,
        "status": res.status,
        "objective": float(sol.objective),
        "max_violation": float(sol.max_violation()),
        "dt": p.dt,
        "tree": sol.tree.to_dict(),
    }


def _tree_trajectory_rows(p: CaseParams, tree_doc: dict) -> list:
    rows = []
    for node in tree_doc["tree"]["nodes"]:
        u = node.get("input")
        rows.append([node["k"] * p.dt, node["k"], node["group"],
                     *node["center"],
                     *(u if u is not None else ["", ""])])
    return rows


_TRAJ_HEADER = ["time", "k", "group", "x_rx", "x_ry", "x_rtheta", "x_rv",
                "x_romega", "x_hx", "x_hy", "u_a", "u_alpha"]


def run_openloop(args) -> int:
    p = _load_params(args.config)
    out = _out_dir(args)
    name = args.controller
    if args.verbose:
        print(f"solving open-loop {name} at the initial state")
    sol, res = open_loop_solution(p, name)
    usable = res.status == "Converged" or sol.max_violation() <= 1e-6
    doc = _tree_document(p, name, sol, res)
    tree_path = os.path.join(out, f"openloop_{name}_tree.json")
    with open(tree_path, "w") as fh:
        json.dump(doc, fh, indent=1)
    rows = _tree_trajectory_rows(p, doc)
    if args.format == "json":
        traj_path = os.path.join(out, f"openloop_{name}_trajectory.json")
        with open(traj_path, "w") as fh:
            json.dump({"schema": SCHEMA_VERSION, "columns": _TRAJ_HEADER,
                       "rows": rows}, fh, indent=1)
    else:
        traj_path = os.path.join(out, f"openloop_{name}_trajectory.csv")
        with open(traj_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_TRAJ_HEADER)
            w.writerows(rows)
    print(f"{name}: status {res.status}, objective {sol.objective:.6f}, "
          f"max violation {sol.max_violation():.3e}")
    print(f"wrote {tree_path}")
    print(f"wrote {traj_path}")
    if not usable:
        print("open-loop solve did not converge", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# closedloop


def _record_document(p: CaseParams, rec: RunRecord) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "controller": rec.controller,
        "seed": rec.seed,
        "dt": p.dt,
        "closed_loop_cost": rec.closed_loop_cost,
        "violations": rec.violations,
        "min_distance": rec.min_distance,
        "states": rec.states.tolist(),
        "inputs": rec.inputs.tolist(),
        "statuses": list(rec.statuses),
        "stage_costs": rec.stage_costs.tolist(),
        "distances": rec.distances.tolist(),
        "solve_times": rec.solve_times.tolist(),
    }


def run_closedloop(args) -> int:
    p = _load_params(args.config)
    out = _out_dir(args)
    name = args.controller
    if args.verbose:
        print(f"simulating {name} seed {args.seed} "
              f"({p.sim_steps} steps of {p.dt}s)")
    rec = closed_loop_run(p, name, args.seed, record_trees=args.trees)
    base = os.path.join(out, f"closedloop_{name}_seed{args.seed}")
    if args.format == "json":
        path = base + ".json"
        with open(path, "w") as fh:
            json.dump(_record_document(p, rec), fh, indent=1)
    else:
        path = base + ".csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RunRecord.csv_header())
            w.writerows(rec.csv_rows(p.dt))
    print(f"{name} seed {args.seed}: cost {rec.closed_loop_cost:.4f}, "
          f"violations {rec.violations}, min distance {rec.min_distance:.3f}")
    print(f"wrote {path}")
    if args.trees:
        tpath = base + "_trees.json"
        with open(tpath, "w") as fh:
            json.dump({"schema": SCHEMA_VERSION, "controller": name,
                       "seed": rec.seed, "trees": rec.trees}, fh, indent=1)
        print(f"wrote {tpath}")
    return 1 if rec.violations else 0


# ---------------------------------------------------------------------------
# batch


def run_batch(args) -> int:
    p = _load_params(args.config)
    out = _out_dir(args)
    names = args.controllers

    progress = None
    if args.verbose:
        def progress(name, i, rec):
            print(f"  {name} seed {rec.seed}: cost {rec.closed_loop_cost:.4f}"
                  f" violations {rec.violations}", flush=True)

    batch = batch_experiment(p, controllers=names, n_runs=args.runs,
                             base_seed=args.base_seed, progress=progress,
                             jobs=args.jobs)
    summary_csv = os.path.join(out, "batch_summary.csv")
    batch.write_summary_csv(summary_csv)
    print(f"wrote {summary_csv}")
    if args.format == "json":
        summary_json = os.path.join(out, "batch_summary.json")
        with open(summary_json, "w") as fh:
            json.dump({"schema": SCHEMA_VERSION, "n_runs": args.runs,
                       "base_seed": args.base_seed,
                       "fingerprint": batch.fingerprint(),
                       "rows": batch.summary()}, fh, indent=1)
        print(f"wrote {summary_json}")
    if args.save_runs:
        run_dir = os.path.join(out, "runs")
        os.makedirs(run_dir, exist_ok=True)
        for name, recs in batch.records.items():
            for rec in recs:
                path = os.path.join(run_dir, f"{name}_seed{rec.seed}.csv")
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(RunRecord.csv_header())
                    w.writerows(rec.csv_rows(p.dt))
        print(f"wrote {sum(len(r) for r in batch.records.values())} "
              f"trajectory files under {run_dir}")

    violations = 0
    for row in batch.summary():
        print(f"{row['controller']:18s} mean cost {row['mean_cost']:9.4f}  "
              f"violations {row['violations']:3d}  "
              f"mean solve {row['mean_solve_time_s'] * 1e3:7.1f} ms")
        violations += row["violations"]
    return 1 if violations else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emsmpc",
        description=(
            "Robust MPC with ellipsoidal reachable sets: self-tests, "
            "open-loop exports, closed-loop runs and batch experiments."),
    )
    parser.add_argument("--version", action="version",
                        version=f"emsmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON file with case parameters")
    common.add_argument("--out", metavar="DIR",
                        help=f"output directory (default: ${OUT_DIR_ENV} "
                             "or the working directory)")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="trajectory/summary format (default csv)")
    common.add_argument("--verbose", action="store_true")

    sub.add_parser("selftest", parents=[common],
                   help="run the geometry, propagation and solver suites")

    ol = sub.add_parser(
        "openloop", parents=[common],
        help="solve one OCP at the initial state and export the tree",
        description="Trajectory CSV columns: " + ", ".join(_TRAJ_HEADER))
    ol.add_argument("--controller", default="multistage_K0",
                    choices=CONTROLLERS)

    cl = sub.add_parser(
        "closedloop", parents=[common],
        help="simulate one closed-loop run",
        description="Trajectory CSV columns: "
                    + ", ".join(RunRecord.csv_header()))
    cl.add_argument("--controller", default="multistage_K0",
                    choices=CONTROLLERS)
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--trees", action="store_true",
                    help="also write the per-solve scenario trees as JSON")

    bt = sub.add_parser(
        "batch", parents=[common],
        help="closed-loop batches over consecutive seeds",
        description="Summary CSV columns: controller, mean_cost, "
                    "violations, mean_solve_time_s")
    bt.add_argument("--controllers", type=_controller_list, default="all",
                    help="comma-separated controller names, or 'all'")
    bt.add_argument("--runs", type=int, default=50)
    bt.add_argument("--base-seed", type=int, default=0)
    bt.add_argument("--jobs", type=int, default=1,
                    help="worker processes for independent runs")
    bt.add_argument("--save-runs", action="store_true",
                    help="write every per-run trajectory CSV under OUT/runs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "controllers", None) == "all":
        args.controllers = list(CONTROLLERS)
    handlers = {"selftest": run_selftest, "openloop": run_openloop,
                "closedloop": run_closedloop, "batch": run_batch}
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
