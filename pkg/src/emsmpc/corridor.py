"""Corridor hand-over case: a unicycle robot passing a walking human.

State ``x = (rx, ry, rtheta, rv, romega, hx, hy)``: robot planar pose,
forward speed and turn rate, plus the human's position. The robot integrates
acceleration inputs ``u = (a, alpha)``; the human walks at a constant nominal
velocity with a bounded disturbance on it. Dynamics are discretized by one
RK4 step per sample (disturbance held constant over the step).

Constraints: keep-out distance to the human, corridor width on ``ry``, speed
range on ``rv``, turn-rate range on ``romega``; the terminal set adds a
near-rest speed bound. The tracking cost references a point moving down the
corridor at a fixed speed, anchored at the initial robot position of each
solve.

Four controllers share this setup: a single robust tube or a two-scenario
tree (one optimizer-placed cut), each with feedback gains fixed to zero or
optimized over a sparsity mask. Closed-loop simulation uses the same RK4 map
as the predictions plus a sampled disturbance on the human velocity.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import DifferentiableFn, cos, sin, sqrt
from .geometry import SmoothingParams
from .scenario import (NoSideError, OcpSolution, OcpSpec, ParametricOcp,
                       extract_solution, rollout, shift_candidate)
from .solver import SolveResult, SolverConfig, solve, warm_start_from
from .tubes import DiscreteDynamics

__all__ = [
    "CONTROLLERS", "BatchResult", "CaseController", "CaseParams", "RunRecord",
    "batch_experiment", "build_case_spec", "closed_loop_cost_step",
    "closed_loop_run", "continuous_dynamics", "make_dynamics",
    "make_parametric", "open_loop_solution", "rk4_step", "sample_disturbance",
]

CONTROLLERS = ("single_tube_K0", "single_tube_Kopt",
               "multistage_K0", "multistage_Kopt")

# state vector indices
IDX_RX, IDX_RY, IDX_RTH, IDX_RV, IDX_ROM, IDX_HX, IDX_HY = range(7)


@dataclass(frozen=True)
class CaseParams:
    dt: float = 0.5
    horizon: int = 10
    sim_steps: int = 16
    v_ref: float = 1.5
    human_velocity: tuple = (-0.6, 0.0)
    sigma_w: float = 0.4
    delta_safe: float = 0.3
    y_max: float = 1.3
    v_max: float = 2.0
    omega_max: float = 1.0
    v_rest: float = 0.01
    q_weights: tuple = (50.0, 50.0, 0.0, 2.0, 0.0, 0.0, 0.0)
    r_weights: tuple = (2.0, 2.0)
    x_init: tuple = (-2.0, 0.0, 0.0, 1.6, 0.0, 3.5, 0.0)
    eps: float = 1e-6
    gain_penalty: float = 1e-3
    sigma_convention: str = "squared"
    propagation_convention: str = "covariance"
    smoothing: SmoothingParams = SmoothingParams()
    distance_guard: float = 1e-12

    @classmethod
    def from_dict(cls, data: dict) -> "CaseParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown case parameters: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("human_velocity", "q_weights", "r_weights", "x_init"):
            if key in kwargs:
                kwargs[key] = tuple(float(v) for v in kwargs[key])
        if "smoothing" in kwargs and isinstance(kwargs["smoothing"], dict):
            kwargs["smoothing"] = SmoothingParams(**kwargs["smoothing"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        """JSON-ready form; :meth:`from_dict` inverts it exactly."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, SmoothingParams):
                v = {"beta": v.beta, "eta": v.eta, "nu": v.nu}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


def continuous_dynamics(p: CaseParams):
    """Right-hand side ``f(x, u, w)`` over generic scalars."""
    vh0, vh1 = float(p.human_velocity[0]), float(p.human_velocity[1])

    def f(x, u, w):
        return [x[IDX_RV] * cos(x[IDX_RTH]),
                x[IDX_RV] * sin(x[IDX_RTH]),
                x[IDX_ROM],
                u[0],
                u[1],
                vh0 + w[0],
                vh1 + w[1]]

    return f


def rk4_step(f, x, u, w, dt):
    """Classic fourth-order step; ``u`` and ``w`` held over the interval."""
    n = len(x)
    k1 = f(x, u, w)
    k2 = f([x[i] + 0.5 * dt * k1[i] for i in range(n)], u, w)
    k3 = f([x[i] + 0.5 * dt * k2[i] for i in range(n)], u, w)
    k4 = f([x[i] + dt * k3[i] for i in range(n)], u, w)
    h = dt / 6.0
    return [x[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            for i in range(n)]


def make_dynamics(p: CaseParams) -> DiscreteDynamics:
    f = continuous_dynamics(p)
    dt = float(p.dt)
    return DiscreteDynamics(n_x=7, n_u=2, n_w=2,
                            step=lambda x, u, w: rk4_step(f, x, u, w, dt))


def _distance(x, guard):
    dx = x[IDX_RX] - x[IDX_HX]
    dy = x[IDX_RY] - x[IDX_HY]
    return sqrt(dx * dx + dy * dy + guard)


def _state_rows(p: CaseParams, arity: int):
    """Safety and box rows ``h(x[, u]) <= 0`` shared by stage and terminal."""
    guard = float(p.distance_guard)
    rows = [
        DifferentiableFn(arity, 1,
                         lambda xs: [p.delta_safe - _distance(xs, guard)]),
        DifferentiableFn(arity, 1, lambda xs: [xs[IDX_RY] - p.y_max]),
        DifferentiableFn(arity, 1, lambda xs: [-p.y_max - xs[IDX_RY]]),
        DifferentiableFn(arity, 1, lambda xs: [xs[IDX_RV] - p.v_max]),
        DifferentiableFn(arity, 1, lambda xs: [-xs[IDX_RV]]),
        DifferentiableFn(arity, 1, lambda xs: [xs[IDX_ROM] - p.omega_max]),
        DifferentiableFn(arity, 1, lambda xs: [-p.omega_max - xs[IDX_ROM]]),
    ]
    return rows


def stage_rows(p: CaseParams) -> tuple:
    return tuple(_state_rows(p, 9))


def terminal_rows(p: CaseParams) -> tuple:
    rows = _state_rows(p, 7)
    rows.append(DifferentiableFn(7, 1, lambda xs: [xs[IDX_RV] - p.v_rest]))
    return tuple(rows)


def _reference(p: CaseParams, rx_anchor, k: int):
    """Tracking reference ``k`` steps ahead of an anchor ``rx`` position.

    ``rx_anchor`` may be a tracer; the reference then stays parametric.
    """
    return [rx_anchor + p.v_ref * k * p.dt, 0.0, 0.0, p.v_ref, 0.0, 0.0, 0.0]


def _quad_cost(p: CaseParams, ref, xs, with_input: bool):
    acc = 0.0
    for i, q in enumerate(p.q_weights):
        if q != 0.0:
            d = xs[i] - ref[i]
            acc = acc + q * (d * d)
    if with_input:
        for j, r in enumerate(p.r_weights):
            if r != 0.0:
                v = xs[7 + j]
                acc = acc + r * (v * v)
    return acc


def stage_cost_fns(p: CaseParams, x_now) -> list:
    """Per-step tracking costs anchored at the current robot position."""
    out = []
    for k in range(p.horizon):
        ref = _reference(p, x_now[IDX_RX], k)
        out.append(DifferentiableFn(
            9, 1, (lambda ref: lambda xs: [_quad_cost(p, ref, xs, True)])(ref)))
    return out


def terminal_cost_fn(p: CaseParams, x_now) -> DifferentiableFn:
    ref = _reference(p, x_now[IDX_RX], p.horizon)
    return DifferentiableFn(
        7, 1, lambda xs: [_quad_cost(p, ref, xs, False)])


def gain_mask() -> np.ndarray:
    """Feedback reads robot speed and the human position, on both inputs."""
    mask = np.zeros((2, 7), dtype=bool)
    mask[:, [IDX_RV, IDX_HX, IDX_HY]] = True
    return mask


def controller_structure(name: str) -> tuple[int, str]:
    """``(robust_horizon, gain_mode)`` of a named controller."""
    try:
        tube, gains = name.rsplit("_", 1)
    except ValueError:
        tube, gains = name, ""
    n_r = {"single_tube": 0, "multistage": 1}.get(tube)
    mode = {"K0": "zero", "Kopt": "optimized"}.get(gains)
    if n_r is None or mode is None:
        raise ValueError(f"unknown controller {name!r}; expected one of "
                         f"{CONTROLLERS}")
    return n_r, mode


def build_case_spec(p: CaseParams, name: str, x_now) -> OcpSpec:
    n_r, mode = controller_structure(name)
    return OcpSpec(dyn=make_dynamics(p), horizon=p.horizon,
                   robust_horizon=n_r,
                   stage_constraints=stage_rows(p),
                   terminal_constraints=terminal_rows(p),
                   stage_cost=stage_cost_fns(p, x_now),
                   terminal_cost=terminal_cost_fn(p, x_now),
                   sigma=p.sigma_w,
                   sigma_convention=p.sigma_convention,
                   propagation_convention=p.propagation_convention,
                   gain_mode=mode,
                   gain_mask=gain_mask() if mode == "optimized" else None,
                   smoothing=p.smoothing, eps=p.eps,
                   gain_penalty=p.gain_penalty)


def make_parametric(p: CaseParams, name: str) -> ParametricOcp:
    return ParametricOcp(lambda x0: build_case_spec(p, name, x0), n_x=7)


def cold_start_guess(p: CaseParams, layout, x_now: np.ndarray) -> np.ndarray:
    """Initial decisions: gentle swerve toward positive ``ry``.

    The corridor is symmetric in ``ry``; zero steering starts on a saddle, so
    the guess breaks the tie upward. The multistage cut splits on the human's
    lateral position through the one-step tube center.
    """
    z = np.zeros(layout.dim)
    swerve = min(4, layout.horizon)
    for k in range(layout.horizon):
        u = [0.0, 0.0]
        if k < swerve // 2:
            u[1] = 0.3
        elif k < swerve:
            u[1] = -0.3
        for g in range(1 << min(k, layout.robust_horizon)):
            sgn = 1.0
            if layout.robust_horizon >= 1 and k >= 1:
                # mirror the swerve for branches on the other side
                top_bit = g >> (min(k, layout.robust_horizon) - 1)
                sgn = 1.0 if top_bit == 0 else -1.0
            z[layout.input_slice(k, g)] = [u[0], sgn * u[1]]
    if layout.robust_horizon >= 1:
        hy_next = float(x_now[IDX_HY]) + p.dt * float(p.human_velocity[1])
        for g in range(1):
            sl = layout.cut_slice(1, g)
            a = np.zeros(7)
            a[IDX_HY] = 1.0
            z[sl.start:sl.start + 7] = a
            z[sl.start + 7] = hy_next  # central: alpha = 0 at zero inputs
    return z


def sample_disturbance(seed: int, t: int, sigma: float) -> np.ndarray:
    """Uniform draw from the disk of radius ``sigma`` (polar square-root)."""
    rng = np.random.default_rng((seed, t))
    u1, u2 = rng.random(2)
    r = sigma * np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    return np.array([r * np.cos(phi), r * np.sin(phi)])


def closed_loop_cost_step(p: CaseParams, x: np.ndarray,
                          u: np.ndarray) -> float:
    """Realized tracking cost of one step.

    Uses the same stage cost as the controller evaluates at the root of each
    solve: the reference is anchored at the robot's own down-corridor
    position, so the penalty falls on lateral offset, speed deviation and
    input effort rather than on accumulated longitudinal lag.
    """
    ref = _reference(p, float(x[IDX_RX]), 0)
    xs = [*map(float, x), *map(float, u)]
    return float(_quad_cost(p, ref, xs, True))


DEFAULT_SOLVER_CONFIG = SolverConfig(kkt_tol=1e-4, feas_tol=1e-6,
                                     max_outer=25, max_inner=600, rho0=200.0)

# Stiffer initial penalty for the partitioned solves: it walls off the
# ridge between the two avoidance basins early, so branches started on
# opposite sides of the human stay there instead of merging.
SPLIT_HOLD_RHO0 = 1000.0


def _mirror_inputs(u: np.ndarray) -> np.ndarray:
    """The ``ry``-mirrored input: same acceleration, negated steering."""
    return np.array([u[0], -u[1]])


def _plan_dodges_up(parametric: ParametricOcp, z: np.ndarray,
                    x_now: np.ndarray) -> bool:
    """Whether a plan's largest lateral excursion is toward positive ry."""
    bound_spec = parametric.spec_factory(x_now)
    tree = rollout(bound_spec, z, x_now, parametric.layout)
    peak = 0.0
    for k in range(1, parametric.layout.horizon + 1):
        y = float(tree.node(k, 0).xbar[IDX_RY])
        if abs(y) > abs(peak):
            peak = y
    return peak >= 0.0


class CaseController:
    """One controller instance: parametric NLP plus warm-start state.

    Feedback-optimizing controllers first solve the corresponding
    fixed-gain problem at a fresh state and lift that solution into the
    larger decision vector. Partitioned controllers build their start from
    the single-tube solution and its ``ry``-mirror (one avoidance side per
    branch) and keep the cut pinned to the horizontal partition through the
    one-step tube center during the solve; left free, the cut slides to a
    tangent plane, which wins the open-loop objective by pairing an
    empty branch with a full one but gives up the recourse that makes the
    tree worthwhile in closed loop. Cold solves at a repeated initial state
    are cached (they are bitwise reproducible), which the batch runner
    relies on since every run starts identically.
    """

    def __init__(self, p: CaseParams, name: str,
                 config: SolverConfig | None = None):
        if name not in CONTROLLERS:
            raise ValueError(f"unknown controller {name!r}")
        self.params = p
        self.name = name
        self.config = config or DEFAULT_SOLVER_CONFIG
        self.parametric = make_parametric(p, name)
        self.n_r, self.gain_mode = controller_structure(name)
        if self.gain_mode == "optimized":
            base = name.rsplit("_", 1)[0] + "_K0"
        elif self.n_r >= 1:
            base = "single_tube_K0"
        else:
            base = None
        self._base = None if base is None else CaseController(
            p, base, self.config)
        self._cold_cache: dict = {}
        self.prev: OcpSolution | None = None

    def reset(self):
        self.prev = None

    @property
    def _split_config(self) -> SolverConfig:
        return dataclasses.replace(self.config, rho0=SPLIT_HOLD_RHO0)

    def _lift_gains(self, z_base: np.ndarray) -> np.ndarray:
        """Embed a fixed-gain solution into the gain-optimizing layout."""
        lay_b = self._base.parametric.layout
        lay = self.parametric.layout
        z = np.zeros(lay.dim)
        for key in lay_b.input_offset:
            z[lay.input_slice(*key)] = z_base[lay_b.input_slice(*key)]
        for key in lay_b.cut_offset:
            z[lay.cut_slice(*key)] = z_base[lay_b.cut_slice(*key)]
        return z

    def _lift_split(self, z_single: np.ndarray,
                    x_now: np.ndarray) -> np.ndarray:
        """Mirror-lift a single-tube plan into the two-scenario layout.

        The branch on the human's lower half gets the upward-dodging copy
        of the plan and vice versa; the shared first input keeps the
        acceleration but starts straight.
        """
        p = self.params
        lay_b = self._base.parametric.layout
        lay = self.parametric.layout
        z = cold_start_guess(p, lay, x_now)
        peak_up = _plan_dodges_up(self._base.parametric, z_single, x_now)
        u0 = np.array(z_single[lay_b.input_slice(0, 0)])
        z[lay.input_slice(0, 0)] = [u0[0], 0.0]
        for k in range(1, lay.horizon):
            uk = np.array(z_single[lay_b.input_slice(k, 0)])
            up, down = (uk, _mirror_inputs(uk)) if peak_up else \
                (_mirror_inputs(uk), uk)
            # group 0 keeps the lower-half human (its cut side a = e_hy,
            # a^T x <= b), so it dodges upward
            z[lay.input_slice(k, 0)] = up
            z[lay.input_slice(k, 1)] = down
        return z

    def _freeze_cut(self, problem, z_ref: np.ndarray):
        """The same NLP with the cut blocks pinned at their values."""
        lay = self.parametric.layout
        lb = np.full(lay.dim, -np.inf)
        ub = np.full(lay.dim, np.inf)
        for key in lay.cut_offset:
            sl = lay.cut_slice(*key)
            lb[sl] = z_ref[sl]
            ub[sl] = z_ref[sl]
        return dataclasses.replace(problem, bounds=(lb, ub))

    def _recenter_cut(self, z: np.ndarray, spec, x_now: np.ndarray):
        """Move each cut offset to pass through its branch tube center.

        Layer by layer, since recentering one layer moves the centers the
        next layer cuts through.
        """
        lay = self.parametric.layout
        for kc in range(1, lay.robust_horizon + 1):
            tree = rollout(spec, z, x_now, lay)
            for g in range(1 << (kc - 1)):
                bp = tree.branches[(kc, g)]
                a = np.asarray(bp.a, float)
                sl = lay.cut_slice(kc, g)
                z[sl.start + len(a)] = float(a @ np.asarray(bp.center, float))
        return z

    def _solve_pinned(self, bound, z0, multipliers0=None):
        frozen = self._freeze_cut(bound.problem, z0)
        return solve(frozen, z0, self._split_config,
                     multipliers0=multipliers0)

    def _cold_solve(self, x_now: np.ndarray):
        key = x_now.tobytes()
        if key in self._cold_cache:
            return self._cold_cache[key]
        bound = self.parametric.bind(x_now)
        if self._base is not None:
            _, base_sol = self._base._cold_solve(x_now)
            z_base = base_sol.z
            if self.gain_mode == "optimized":
                z0 = self._lift_gains(z_base)
            else:
                z0 = self._lift_split(z_base, x_now)
        else:
            z0 = cold_start_guess(self.params, self.parametric.layout, x_now)
        if self.n_r >= 1:
            res = self._solve_pinned(bound, z0)
        else:
            res = solve(bound.problem, z0, self.config)
        sol = extract_solution(bound, res.z, res)
        self._cold_cache[key] = (res, sol)
        return res, sol

    def solve_step(self, x_now) -> tuple[np.ndarray, str, OcpSolution, float]:
        """Returns ``(input, status, solution, wall_time)`` at ``x_now``."""
        x_now = np.asarray(x_now, dtype=float)
        warm = None
        if self.prev is not None:
            try:
                warm = shift_candidate(self.prev, x_now)
            except NoSideError:
                warm = None
        if warm is None:
            res, sol = self._cold_solve(x_now)
        else:
            bound = self.parametric.bind(x_now)
            if self.n_r >= 1:
                # keep the cut free here: while the human's side is still
                # ambiguous the warm start holds the solve in the hedging
                # basin, and once one side is clearly cheaper the optimizer
                # slides the cut toward tangency, which is how the plan
                # commits to a single side without an input spike
                z0 = self._recenter_cut(np.array(warm), bound.spec, x_now)
                res = solve(bound.problem, z0, self.config)
            else:
                if self.prev.result is not None:
                    z0, lam0 = warm_start_from(self.prev.result, warm)
                else:
                    z0, lam0 = np.array(warm), None
                res = solve(bound.problem, z0, self.config,
                            multipliers0=lam0)
            sol = extract_solution(bound, res.z, res)

        usable = res.status == "Converged" or sol.max_violation() <= 1e-6
        if usable:
            self.prev = sol
            return sol.first_input(), res.status, sol, res.wall_time

        # infeasible solve: fall back to the shifted previous solution
        if self.prev is not None:
            bound = self.parametric.bind(x_now)
            try:
                z_shift = shift_candidate(self.prev, x_now)
                fallback = extract_solution(bound, z_shift)
                self.prev = fallback
                return (fallback.first_input(), "ShiftApplied", fallback,
                        res.wall_time)
            except NoSideError:
                pass
        # nothing usable to shift from: report the failed solve as-is and
        # keep no warm-start state so the next step starts cold
        self.prev = None
        return sol.first_input(), res.status, sol, res.wall_time


@dataclass
class RunRecord:
    """One closed-loop simulation: trajectories, costs and diagnostics."""

    controller: str
    seed: int
    states: np.ndarray
    inputs: np.ndarray
    statuses: list
    solve_times: np.ndarray
    stage_costs: np.ndarray
    distances: np.ndarray
    min_distance: float
    closed_loop_cost: float
    violations: int
    trees: list | None = None

    def csv_rows(self, dt: float) -> list:
        """Trajectory rows: step time, state, input, distance, status.

        The final row carries the terminal state with empty input fields.
        """
        rows = []
        T = self.inputs.shape[0]
        for t in range(T):
            rows.append([t * dt, *self.states[t], *self.inputs[t],
                         self.distances[t], self.statuses[t]])
        rows.append([T * dt, *self.states[T], "", "",
                     self.distances[T], ""])
        return rows

    @staticmethod
    def csv_header() -> list:
        return ["time", "x_rx", "x_ry", "x_rtheta", "x_rv", "x_romega",
                "x_hx", "x_hy", "u_a", "u_alpha", "min_distance", "status"]

    def fingerprint(self) -> str:
        """Hash of the deterministic payload of this run.

        Wall-clock solve times are excluded: they are diagnostics, not
        outputs. Everything the simulation computes from (params, controller,
        seed) enters the digest, so two runs agree on the fingerprint exactly
        when they agree bitwise on trajectories, costs and statuses.
        """
        h = hashlib.sha256()
        h.update(self.controller.encode())
        h.update(str(self.seed).encode())
        for arr in (self.states, self.inputs, self.stage_costs,
                    self.distances):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.statuses).encode())
        h.update(repr((self.min_distance, self.closed_loop_cost,
                       self.violations)).encode())
        return h.hexdigest()


def _violations(p: CaseParams, states: np.ndarray, distances: np.ndarray,
                tol: float = 1e-6) -> int:
    """Number of simulation steps with any state constraint violated."""
    count = 0
    for t in range(states.shape[0]):
        x = states[t]
        bad = (distances[t] < p.delta_safe - tol
               or abs(x[IDX_RY]) > p.y_max + tol
               or x[IDX_RV] < -tol or x[IDX_RV] > p.v_max + tol
               or abs(x[IDX_ROM]) > p.omega_max + tol)
        count += int(bad)
    return count


def closed_loop_run(p: CaseParams, name: str, seed: int,
                    controller: CaseController | None = None,
                    record_trees: bool = False) -> RunRecord:
    """Simulate ``sim_steps`` closed-loop steps from ``p.x_init``.

    The truth model is the same RK4 map as the predictions, driven by the
    seeded disturbance sequence. Pass a shared ``controller`` to reuse its
    recorded tape across runs (it is reset first).
    """
    ctrl = controller or CaseController(p, name)
    ctrl.reset()
    dyn = make_dynamics(p)
    x = np.array(p.x_init, dtype=float)
    states = [x.copy()]
    inputs, statuses, times, costs, dists = [], [], [], [], []
    trees = []
    guard = float(p.distance_guard)
    for t in range(p.sim_steps):
        u, status, sol, wall = ctrl.solve_step(x)
        if record_trees and sol is not None:
            trees.append(sol.tree.to_dict())
        w = sample_disturbance(seed, t, p.sigma_w)
        costs.append(closed_loop_cost_step(p, x, u))
        dists.append(float(_distance([float(v) for v in x], guard)))
        inputs.append(np.asarray(u, dtype=float))
        statuses.append(status)
        times.append(wall)
        x = np.array(dyn.step([float(v) for v in x],
                              [float(v) for v in u],
                              [float(v) for v in w]), dtype=float)
        states.append(x.copy())
    dists.append(float(_distance([float(v) for v in x], guard)))
    states = np.array(states)
    distances = np.array(dists)
    record = RunRecord(controller=name, seed=seed, states=states,
                       inputs=np.array(inputs), statuses=statuses,
                       solve_times=np.array(times),
                       stage_costs=np.array(costs),
                       distances=distances,
                       min_distance=float(distances.min()),
                       closed_loop_cost=float(np.sum(costs)),
                       violations=_violations(p, states, distances))
    if record_trees:
        record.trees = trees
    return record


@dataclass
class BatchResult:
    params: CaseParams
    n_runs: int
    base_seed: int
    records: dict = field(default_factory=dict)

    def summary(self) -> list:
        rows = []
        for name, recs in self.records.items():
            rows.append({
                "controller": name,
                "mean_cost": float(np.mean([r.closed_loop_cost
                                            for r in recs])),
                "violations": int(sum(r.violations for r in recs)),
                "mean_solve_time_s": float(np.mean(np.concatenate(
                    [r.solve_times for r in recs]))),
            })
        return rows

    def write_summary_csv(self, path):
        rows = self.summary()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["controller", "mean_cost",
                                                    "violations",
                                                    "mean_solve_time_s"])
            writer.writeheader()
            writer.writerows(rows)

    def fingerprint(self) -> str:
        """Digest over all runs in (controller, seed) order, timing excluded."""
        h = hashlib.sha256()
        for name in sorted(self.records):
            for rec in sorted(self.records[name], key=lambda r: r.seed):
                h.update(rec.fingerprint().encode())
        return h.hexdigest()


def _run_chunk(p: CaseParams, name: str, seeds: Sequence[int],
               config: SolverConfig | None) -> list:
    """Run one controller over a block of seeds (worker for parallel batches)."""
    ctrl = CaseController(p, name, config)
    return [closed_loop_run(p, name, s, controller=ctrl) for s in seeds]


def batch_experiment(p: CaseParams, controllers: Sequence[str] | None = None,
                     n_runs: int = 50, base_seed: int = 0,
                     config: SolverConfig | None = None,
                     progress=None, jobs: int = 1) -> BatchResult:
    """Closed-loop batches per controller over consecutive seeds.

    One controller instance (and so one recorded tape and cold-start cache)
    serves all of a controller's runs. Runs are independent given the seed,
    so with ``jobs > 1`` the seed range is split into contiguous blocks run
    in worker processes; records are reassembled in seed order either way,
    making repeated batches bitwise reproducible (timing fields aside).
    """
    names = tuple(controllers) if controllers else CONTROLLERS
    out = BatchResult(params=p, n_runs=n_runs, base_seed=base_seed)
    seeds = [base_seed + i for i in range(n_runs)]
    if jobs > 1 and n_runs > 1:
        blocks = max(1, min(jobs, n_runs))
        bounds = np.linspace(0, n_runs, blocks + 1).astype(int)
        with ProcessPoolExecutor(max_workers=blocks) as pool:
            futs = {}
            for name in names:
                futs[name] = [pool.submit(_run_chunk, p, name,
                                          seeds[a:b], config)
                              for a, b in zip(bounds[:-1], bounds[1:])
                              if b > a]
            for name in names:
                recs = []
                for fut in futs[name]:
                    recs.extend(fut.result())
                out.records[name] = recs
                if progress is not None:
                    for i, rec in enumerate(recs):
                        progress(name, i, rec)
        return out
    for name in names:
        ctrl = CaseController(p, name, config)
        recs = []
        for i in range(n_runs):
            rec = closed_loop_run(p, name, base_seed + i, controller=ctrl)
            recs.append(rec)
            if progress is not None:
                progress(name, i, rec)
        out.records[name] = recs
    return out


def open_loop_solution(p: CaseParams, name: str,
                       config: SolverConfig | None = None,
                       x_init=None) -> tuple[OcpSolution, SolveResult]:
    """Single cold solve at the initial state (no simulation)."""
    ctrl = CaseController(p, name, config)
    x0 = np.array(p.x_init if x_init is None else x_init, dtype=float)
    res, sol = ctrl._cold_solve(x0)
    return sol, res
