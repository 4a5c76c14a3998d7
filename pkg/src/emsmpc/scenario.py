"""Scenario-tree optimal control over ellipsoidal tubes.

A robust horizon ``n_r`` splits the tube at steps ``1..n_r``: each split owns
one halfspace ``a^T x <= b`` whose two sides are enclosed by minimum-volume
ellipsoids, doubling the number of branches, for ``2^n_r`` scenarios total.
Decision variables are per-node inputs (and optionally masked feedback
gains), plus the cut coefficients themselves, so the optimizer places the
partitions. Non-anticipativity holds by construction: scenarios that share a
node read the same storage, there are no duplicated variables to tie
together with equality constraints.

Node indexing: at step ``k`` there are ``2^min(k, n_r)`` groups; group ``g``
branches into ``2g`` (side ``a^T x <= b``) and ``2g + 1`` (mirrored side)
while ``k < n_r``. Scenario ``s`` passes through group
``s >> (n_r - min(k, n_r))`` at step ``k``, and a node's cost term carries
multiplicity ``2^(n_r - min(k, n_r))``.

The transcription is sequential: states and shape matrices are eliminated by
rolling the dynamics forward inside one recorded tape, so the NLP sees only
inputs, gains and cuts. Every formula is written over generic scalars and
shared with the float path; the tape is recorded once and replayed per solve.

Residual ordering (fixed, relied on by warm starts): stage rows by step then
group then row, terminal rows by leaf group then row, then per cut two
placement rows ``alpha - 1 <= 0`` and ``-1 - alpha <= 0``, then per cut two
normalization rows ``|a|^2 - 1 <= 0`` and ``1 - |a|^2 <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import DifferentiableFn, sqrt, trace, value_and_jacobian_scalars
from .geometry import (Ellipsoid, Halfspace, SmoothingParams, SymPsdMatrix,
                       _cut_coefficients_raw, contains, smooth_clamp_alpha)
from .solver import NlpProblem
from .tubes import (DiscreteDynamics, NonlinearityBound, ZeroBound,
                    _mat_vec, _propagate_core, _soft_positive, _tighten_core)

__all__ = [
    "BranchPoint", "DecisionLayout", "NoSideError", "OcpSolution", "OcpSpec",
    "ParametricOcp", "ScenarioTree", "TranscribedOcp", "TreeNode",
    "build_layout", "residual_labels", "rollout", "shift_candidate",
    "transcribe",
]

ALPHA_GUARD = 1e-12  # keeps alpha differentiable when a^T P a vanishes


class NoSideError(RuntimeError):
    """Observed state is not inside the predicted one-step ellipsoid."""


def _cut_root_radicand(quad):
    """Radicand of the cut normal's tube radius, total over all iterates.

    ``quad`` is ``a^T P a``; the soft positive part keeps it finite when an
    upstream cut beyond tangency made ``P`` indefinite, and the trailing
    guard keeps the root strictly positive so ``alpha`` never divides by
    zero. :func:`shift_candidate` reuses this so its tangent cut reproduces
    ``alpha = 1`` under the exact arithmetic of the traced rollout.
    """
    return _soft_positive(quad + ALPHA_GUARD) + ALPHA_GUARD


@dataclass(frozen=True, eq=False)
class OcpSpec:
    """Multi-stage tube OCP over a horizon ``N`` with ``n_r`` tree splits.

    ``stage_constraints`` rows ``h(x, u) <= 0`` have arity ``n_x + n_u``;
    ``terminal_constraints`` rows have arity ``n_x``. ``stage_cost`` is one
    function of ``(x, u)`` used at every step or a sequence of ``N`` of them.
    ``weights`` is a scalar applied per scenario or an array of shape
    ``(N + 1, 2^n_r)`` of per-step per-scenario weights (row ``N`` weighs the
    terminal cost). ``sigma`` scales the disturbance ellipsoid; with
    ``sigma_convention="squared"`` the shape update uses ``sigma**2``.
    ``gain_mask`` (bool, ``n_u x n_x``) marks which feedback entries are
    decision variables when ``gain_mode="optimized"``; the stage-0 gain is
    structurally zero either way. ``gain_penalty`` scales a quadratic
    regularization of the free gain entries.
    """

    dyn: DiscreteDynamics
    horizon: int
    robust_horizon: int
    stage_constraints: tuple
    terminal_constraints: tuple
    stage_cost: object
    terminal_cost: DifferentiableFn
    sigma: float
    sigma_convention: str = "squared"
    propagation_convention: str = "covariance"
    gain_mode: str = "zero"
    gain_mask: object = None
    weights: object = 1.0
    smoothing: SmoothingParams = SmoothingParams()
    eps: float = 1e-6
    gain_penalty: float = 1e-3
    bound: NonlinearityBound = ZeroBound()

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.robust_horizon <= self.horizon - 1:
            raise ValueError("robust_horizon must lie in [0, horizon - 1]")
        if self.sigma_convention not in ("squared", "linear"):
            raise ValueError(f"unknown sigma convention "
                             f"{self.sigma_convention!r}")
        if self.propagation_convention not in ("covariance", "printed"):
            raise ValueError(f"unknown propagation convention "
                             f"{self.propagation_convention!r}")
        if self.gain_mode not in ("zero", "optimized"):
            raise ValueError(f"unknown gain mode {self.gain_mode!r}")
        if self.gain_mode == "optimized":
            mask = np.asarray(self.gain_mask, dtype=bool)
            if mask.shape != (self.dyn.n_u, self.dyn.n_x):
                raise ValueError("gain_mask must have shape (n_u, n_x)")
        if isinstance(self.stage_cost, (list, tuple)) and \
                len(self.stage_cost) != self.horizon:
            raise ValueError("per-step stage costs must match the horizon")
        w = self.weights
        if not np.isscalar(w):
            w = np.asarray(w, dtype=float)
            if w.shape != (self.horizon + 1, self.n_scenarios):
                raise ValueError("weights must be scalar or of shape "
                                 "(horizon + 1, n_scenarios)")

    @property
    def n_scenarios(self) -> int:
        return 1 << self.robust_horizon

    @property
    def sigma_eff(self) -> float:
        s = float(self.sigma)
        return s * s if self.sigma_convention == "squared" else s

    def stage_cost_at(self, k: int) -> DifferentiableFn:
        if isinstance(self.stage_cost, (list, tuple)):
            return self.stage_cost[k]
        return self.stage_cost

    def owners(self, k: int) -> int:
        """Number of distinct tree nodes at step ``k``."""
        return 1 << min(k, self.robust_horizon)

    def scenario_group(self, k: int, s: int) -> int:
        """Group at step ``k`` that scenario ``s`` reads from."""
        return s >> (self.robust_horizon - min(k, self.robust_horizon))

    def multiplicity(self, k: int, g: int) -> int:
        """Number of scenarios sharing node ``(k, g)``."""
        return 1 << (self.robust_horizon - min(k, self.robust_horizon))

    def group_weight(self, k: int, g: int) -> float:
        """Summed scenario weight of node ``(k, g)`` in the cost."""
        if np.isscalar(self.weights):
            return float(self.weights) * self.multiplicity(k, g)
        m = self.multiplicity(k, g)
        return float(np.sum(self.weights[k, g * m:(g + 1) * m]))


@dataclass(frozen=True, eq=False)
class DecisionLayout:
    """Offsets of inputs, gains and cuts inside the decision vector.

    Packing order (deterministic): inputs by step then group, then (when
    gains are optimized) masked gain entries by step ``1..N-1`` then group,
    then per cut the normal ``a`` followed by the offset ``b``, by cut step
    then parent group.
    """

    n_x: int
    n_u: int
    horizon: int
    robust_horizon: int
    gain_mode: str
    mask_entries: tuple
    dim: int
    input_offset: dict
    gain_offset: dict
    cut_offset: dict

    def input_slice(self, k: int, g: int) -> slice:
        off = self.input_offset[(k, g)]
        return slice(off, off + self.n_u)

    def gain_slice(self, k: int, g: int) -> slice:
        off = self.gain_offset[(k, g)]
        return slice(off, off + len(self.mask_entries))

    def cut_slice(self, kc: int, g: int) -> slice:
        """Slice holding ``[a_1 .. a_nx, b]`` of cut ``(kc, g)``."""
        off = self.cut_offset[(kc, g)]
        return slice(off, off + self.n_x + 1)

    def default_guess(self) -> np.ndarray:
        """All-zero inputs and gains; cuts along the first coordinate."""
        z = np.zeros(self.dim)
        for key in self.cut_offset:
            z[self.cut_offset[key]] = 1.0
        return z

    def gain_matrix(self, z, k: int, g: int):
        """Feedback gain rows at node ``(k, g)`` for a decision vector ``z``.

        Returns nested lists (generic scalars); ``None`` when the node has no
        feedback. Step 0 is structurally zero.
        """
        if self.gain_mode != "optimized" or k == 0:
            return None
        rows = [[0.0] * self.n_x for _ in range(self.n_u)]
        off = self.gain_offset[(k, g)]
        for idx, (r, c) in enumerate(self.mask_entries):
            rows[r][c] = z[off + idx]
        return rows


def build_layout(spec: OcpSpec) -> DecisionLayout:
    n_x, n_u = spec.dyn.n_x, spec.dyn.n_u
    N, n_r = spec.horizon, spec.robust_horizon
    if spec.gain_mode == "optimized":
        mask = np.asarray(spec.gain_mask, dtype=bool)
        mask_entries = tuple((int(r), int(c))
                             for r in range(n_u) for c in range(n_x)
                             if mask[r, c])
    else:
        mask_entries = ()
    input_offset, gain_offset, cut_offset = {}, {}, {}
    off = 0
    for k in range(N):
        for g in range(spec.owners(k)):
            input_offset[(k, g)] = off
            off += n_u
    if spec.gain_mode == "optimized":
        for k in range(1, N):
            for g in range(spec.owners(k)):
                gain_offset[(k, g)] = off
                off += len(mask_entries)
    for kc in range(1, n_r + 1):
        for g in range(1 << (kc - 1)):
            cut_offset[(kc, g)] = off
            off += n_x + 1
    return DecisionLayout(n_x=n_x, n_u=n_u, horizon=N, robust_horizon=n_r,
                          gain_mode=spec.gain_mode, mask_entries=mask_entries,
                          dim=off, input_offset=input_offset,
                          gain_offset=gain_offset, cut_offset=cut_offset)


@dataclass
class TreeNode:
    """State of one tree node: nominal point, shape, and stage decisions."""

    k: int
    g: int
    xbar: list
    P: list
    u: list | None = None
    K: list | None = None


@dataclass
class BranchPoint:
    """Pre-partition data of the cut owned by node ``(k - 1, g)``.

    ``center``/``shape`` describe the one-step-ahead ellipsoid the cut
    splits; ``alpha`` is its signed distance ratio to the cut plane.
    """

    k: int
    g: int
    a: list
    b: object
    alpha: object
    center: list
    shape: list


@dataclass
class ScenarioTree:
    horizon: int
    robust_horizon: int
    n_x: int
    n_u: int
    nodes: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)

    @property
    def n_scenarios(self) -> int:
        return 1 << self.robust_horizon

    def owners(self, k: int) -> int:
        return 1 << min(k, self.robust_horizon)

    def node(self, k: int, g: int) -> TreeNode:
        return self.nodes[(k, g)]

    def node_for_scenario(self, k: int, s: int) -> TreeNode:
        g = s >> (self.robust_horizon - min(k, self.robust_horizon))
        return self.nodes[(k, g)]

    def scenario_states(self, s: int) -> np.ndarray:
        """Nominal state trajectory of scenario ``s``; shape (N+1, n_x)."""
        return np.array([self.node_for_scenario(k, s).xbar
                         for k in range(self.horizon + 1)], dtype=float)

    def scenario_inputs(self, s: int) -> np.ndarray:
        return np.array([self.node_for_scenario(k, s).u
                         for k in range(self.horizon)], dtype=float)

    def to_dict(self) -> dict:
        """JSON-ready snapshot (floats only; use on rolled-out float trees)."""
        nodes = []
        for (k, g), node in sorted(self.nodes.items()):
            P = np.asarray(node.P, dtype=float)
            n = P.shape[0]
            entry = {
                "k": k, "group": g,
                "center": [float(v) for v in node.xbar],
                "shape_upper_triangle": [float(P[i, j]) for i in range(n)
                                         for j in range(i, n)],
            }
            if node.u is not None:
                entry["input"] = [float(v) for v in node.u]
            nodes.append(entry)
        cuts = []
        for (k, g), bp in sorted(self.branches.items()):
            cuts.append({"k": k, "group": g,
                         "a": [float(v) for v in bp.a], "b": float(bp.b),
                         "alpha": float(bp.alpha)})
        return {"horizon": self.horizon,
                "robust_horizon": self.robust_horizon,
                "n_scenarios": self.n_scenarios,
                "nodes": nodes, "cuts": cuts}


def residual_labels(spec: OcpSpec) -> tuple:
    """Names of the residual rows in transcription order."""
    labels = []
    for k in range(spec.horizon):
        for g in range(spec.owners(k)):
            for r in range(len(spec.stage_constraints)):
                labels.append(("stage", k, g, r))
    for g in range(spec.owners(spec.horizon)):
        for r in range(len(spec.terminal_constraints)):
            labels.append(("terminal", spec.horizon, g, r))
    for kc in range(1, spec.robust_horizon + 1):
        for g in range(1 << (kc - 1)):
            labels.append(("placement_upper", kc, g))
            labels.append(("placement_lower", kc, g))
    for kc in range(1, spec.robust_horizon + 1):
        for g in range(1 << (kc - 1)):
            labels.append(("norm_upper", kc, g))
            labels.append(("norm_lower", kc, g))
    return tuple(labels)


def _constraint_grad(h: DifferentiableFn, point):
    """Value and gradient of a scalar constraint row at generic scalars."""
    vals, rows = value_and_jacobian_scalars(h.evaluator, list(point))
    return vals[0], rows[0]


def _branch_children(x_tilde, P_tilde, a, b, n_x, smoothing):
    """Enclose both sides of a cut; returns (alpha, [(d0, R0), (d1, R1)]).

    ``alpha`` is the raw (unsmoothed) distance ratio of the kept side
    ``a^T x <= b``; the mirrored side sees ``-alpha``. Shapes are built
    symmetric with shared scalar objects to keep tapes small.
    """
    q = _mat_vec(P_tilde, a)
    s = _cut_root_radicand(sum(a[i] * q[i] for i in range(n_x)))
    root = sqrt(s)
    alpha = (sum(a[i] * x_tilde[i] for i in range(n_x)) - b) / root
    children = []
    for side in (0, 1):
        alpha_side = alpha if side == 0 else -alpha
        abar = smooth_clamp_alpha(alpha_side, n_x, smoothing)
        tau, sigma_cut, delta = _cut_coefficients_raw(abar, n_x)
        scale = tau / root
        sgn = 1.0 if side == 0 else -1.0
        d = [x_tilde[i] - sgn * scale * q[i] for i in range(n_x)]
        coef = sigma_cut / s
        R = [[0.0] * n_x for _ in range(n_x)]
        for i in range(n_x):
            for j in range(i, n_x):
                val = delta * (P_tilde[i][j] - coef * (q[i] * q[j]))
                R[i][j] = val
                R[j][i] = val
        children.append((d, R))
    return alpha, children


def _evaluate(spec: OcpSpec, layout: DecisionLayout, z, x_init):
    """Roll the tree forward and assemble cost and residuals.

    Works on generic scalars: floats for plain evaluation, tracers during
    transcription. Returns ``(cost, residuals, tree)``.
    """
    n_x, n_u, n_w = spec.dyn.n_x, spec.dyn.n_u, spec.dyn.n_w
    N, n_r = spec.horizon, spec.robust_horizon
    sigma_eff = spec.sigma_eff
    tree = ScenarioTree(horizon=N, robust_horizon=n_r, n_x=n_x, n_u=n_u)
    tree.nodes[(0, 0)] = TreeNode(k=0, g=0, xbar=list(x_init),
                                  P=[[0.0] * n_x for _ in range(n_x)])
    cost = 0.0
    stage_res = []
    zero_w = [0.0] * n_w

    for k in range(N):
        for g in range(spec.owners(k)):
            node = tree.nodes[(k, g)]
            u = list(z[layout.input_slice(k, g)])
            K = layout.gain_matrix(z, k, g)
            node.u, node.K = u, K
            point = [*node.xbar, *u]
            cost = cost + spec.group_weight(k, g) * \
                spec.stage_cost_at(k).evaluator(point)[0]
            bound_extra = spec.bound.constraint_term(node.xbar, u)
            for h in spec.stage_constraints:
                val, grad = _constraint_grad(h, point)
                radius = _tighten_core(grad[:n_x], grad[n_x:], node.P, K,
                                       spec.eps)
                stage_res.append(val + radius + bound_extra)
            # one linearization pass also yields the nominal successor
            x_next, rows = value_and_jacobian_scalars(
                lambda xs: spec.dyn.step(xs[:n_x], xs[n_x:n_x + n_u],
                                         xs[n_x + n_u:]),
                [*node.xbar, *u, *zero_w])
            A = [r[:n_x] for r in rows]
            B = [r[n_x:n_x + n_u] for r in rows]
            Gamma = [r[n_x + n_u:] for r in rows]
            omega = spec.bound.shape_term(node.P, node.xbar, u)
            P_next = _propagate_core(node.P, A, B, Gamma, K, sigma_eff,
                                     omega, spec.propagation_convention)
            kc = k + 1
            if kc <= n_r:
                block = z[layout.cut_slice(kc, g)]
                a, b = list(block[:n_x]), block[n_x]
                alpha, children = _branch_children(x_next, P_next, a, b,
                                                   n_x, spec.smoothing)
                tree.branches[(kc, g)] = BranchPoint(
                    k=kc, g=g, a=a, b=b, alpha=alpha,
                    center=x_next, shape=P_next)
                for side, (d, R) in enumerate(children):
                    cg = 2 * g + side
                    tree.nodes[(kc, cg)] = TreeNode(k=kc, g=cg, xbar=d, P=R)
            else:
                tree.nodes[(kc, g)] = TreeNode(k=kc, g=g, xbar=x_next,
                                               P=P_next)

    term_res = []
    for g in range(spec.owners(N)):
        node = tree.nodes[(N, g)]
        cost = cost + spec.group_weight(N, g) * \
            spec.terminal_cost.evaluator(node.xbar)[0]
        for h in spec.terminal_constraints:
            val, grad = _constraint_grad(h, node.xbar)
            radius = _tighten_core(grad, None, node.P, None, spec.eps)
            term_res.append(val + radius)

    place_res, norm_res = [], []
    for kc in range(1, n_r + 1):
        for g in range(1 << (kc - 1)):
            bp = tree.branches[(kc, g)]
            place_res.append(bp.alpha - 1.0)
            place_res.append(-1.0 - bp.alpha)
            nrm = sum(ai * ai for ai in bp.a)
            norm_res.append(nrm - 1.0)
            norm_res.append(1.0 - nrm)

    if spec.gain_mode == "optimized" and spec.gain_penalty != 0.0:
        reg = 0.0
        for key in layout.gain_offset:
            for v in z[layout.gain_slice(*key)]:
                reg = reg + v * v
        cost = cost + spec.gain_penalty * reg

    return cost, [*stage_res, *term_res, *place_res, *norm_res], tree


def rollout(spec: OcpSpec, z, x_init,
            layout: DecisionLayout | None = None) -> ScenarioTree:
    """Float evaluation of the tree for a given decision vector."""
    layout = layout or build_layout(spec)
    zf = [float(v) for v in z]
    x0 = [float(v) for v in x_init]
    _, _, tree = _evaluate(spec, layout, zf, x0)
    return tree


class _TapeNlp:
    """NlpProblem callbacks backed by one recorded tape.

    The tape's inputs are the decision vector optionally followed by frozen
    parameter scalars; output 0 is the cost, the rest are residuals. Both
    value and value-plus-Jacobian replays memoize on the latest ``z``.
    """

    def __init__(self, tape, dim, params):
        self.tape = tape
        self.dim = dim
        self.params = np.asarray(params, dtype=float)
        n_total = dim + self.params.size
        if tape.n_inputs != n_total:
            raise ValueError("tape input count does not match layout")
        seeds = np.zeros((n_total, dim))
        seeds[:dim, :] = np.eye(dim)
        self._seeds = seeds
        self._buf = np.empty(n_total)
        self._buf[dim:] = self.params
        self._val_key = None
        self._vals = None
        self._jac_key = None
        self._jac = None

    def _values(self, z):
        key = z.tobytes()
        if key != self._val_key:
            self._buf[:self.dim] = z
            self._vals = self.tape.values(self._buf).copy()
            self._val_key = key
        return self._vals

    def _value_jac(self, z):
        key = z.tobytes()
        if key != self._jac_key:
            self._buf[:self.dim] = z
            vals, jac = self.tape.values_and_jacobian(self._buf, self._seeds)
            self._jac = (vals.copy(), jac.copy())
            self._jac_key = key
            self._vals = self._jac[0]
            self._val_key = key
        return self._jac

    def objective(self, z):
        return float(self._values(np.asarray(z, float))[0])

    def residuals(self, z):
        return self._values(np.asarray(z, float))[1:]

    def gradient(self, z):
        vals, jac = self._value_jac(np.asarray(z, float))
        return jac[0]

    def jacobian(self, z):
        vals, jac = self._value_jac(np.asarray(z, float))
        return jac[1:]

    def value_and_jac(self, z):
        vals, jac = self._value_jac(np.asarray(z, float))
        return float(vals[0]), vals[1:], jac[0], jac[1:]

    def value_and_vjp(self, z, w_obj, w_res):
        z = np.asarray(z, float)
        self._buf[:self.dim] = z
        w = np.empty(1 + len(w_res))
        w[0] = w_obj
        w[1:] = w_res
        vals, grad = self.tape.values_and_vjp(self._buf, w)
        self._vals = vals.copy()
        self._val_key = z.tobytes()
        return float(vals[0]), self._vals[1:], grad[:self.dim]


@dataclass(eq=False)
class TranscribedOcp:
    """A spec bound to an initial state as a solvable NLP."""

    spec: OcpSpec
    layout: DecisionLayout
    x_init: np.ndarray
    problem: NlpProblem
    tape: object


def _make_problem(tape, layout, params, labels) -> NlpProblem:
    backend = _TapeNlp(tape, layout.dim, params)
    return NlpProblem(dim=layout.dim, n_res=len(labels),
                      objective=backend.objective,
                      residuals=backend.residuals,
                      gradient=backend.gradient,
                      jacobian=backend.jacobian,
                      value_and_jac=backend.value_and_jac,
                      value_and_vjp=backend.value_and_vjp,
                      labels=labels)


def transcribe(spec: OcpSpec, x_init) -> TranscribedOcp:
    """Record the tree rollout at a fixed initial state into an NLP.

    The initial state is baked into the tape as constants (letting constant
    folding prune whatever does not depend on decisions). Use
    :class:`ParametricOcp` to share one tape across initial states.
    """
    layout = build_layout(spec)
    x0 = [float(v) for v in x_init]
    labels = residual_labels(spec)

    def fn(zs):
        cost, res, _ = _evaluate(spec, layout, zs, x0)
        return [cost, *res]

    tape = trace(fn, layout.dim)
    problem = _make_problem(tape, layout, np.zeros(0), labels)
    return TranscribedOcp(spec=spec, layout=layout,
                          x_init=np.asarray(x0, float), problem=problem,
                          tape=tape)


class ParametricOcp:
    """One tape reused across initial states.

    ``spec_factory`` maps an initial-state scalar sequence to an
    :class:`OcpSpec`; it must be structure-stable (identical dimensions,
    constraint counts and modes for every initial state), because the recorded
    tape is built once from tracer scalars. Per-state references inside costs
    or constraints must be computed from the passed scalars so they stay part
    of the recording.
    """

    def __init__(self, spec_factory: Callable[[Sequence], OcpSpec], n_x: int):
        self.spec_factory = spec_factory
        self.n_x = n_x
        probe = spec_factory([0.0] * n_x)
        if probe.dyn.n_x != n_x:
            raise ValueError("n_x does not match the factory's dynamics")
        self.layout = build_layout(probe)
        self.labels = residual_labels(probe)
        layout = self.layout

        def fn(inputs):
            z = inputs[:layout.dim]
            x0 = inputs[layout.dim:]
            spec = spec_factory(x0)
            cost, res, _ = _evaluate(spec, layout, z, x0)
            return [cost, *res]

        self.tape = trace(fn, layout.dim + n_x)

    def bind(self, x_init) -> TranscribedOcp:
        x0 = np.asarray([float(v) for v in x_init])
        if x0.shape != (self.n_x,):
            raise ValueError(f"x_init must have length {self.n_x}")
        problem = _make_problem(self.tape, self.layout, x0, self.labels)
        spec = self.spec_factory([float(v) for v in x0])
        return TranscribedOcp(spec=spec, layout=self.layout, x_init=x0,
                              problem=problem, tape=self.tape)


@dataclass(eq=False)
class OcpSolution:
    """Decision vector plus the float tree it induces."""

    spec: OcpSpec
    layout: DecisionLayout
    x_init: np.ndarray
    z: np.ndarray
    tree: ScenarioTree
    objective: float
    residuals: np.ndarray
    labels: tuple
    result: object = None

    def first_input(self) -> np.ndarray:
        return np.asarray(self.tree.node(0, 0).u, dtype=float)

    def input(self, k: int, g: int = 0) -> np.ndarray:
        return np.asarray(self.z[self.layout.input_slice(k, g)], dtype=float)

    def gain(self, k: int, g: int = 0) -> np.ndarray:
        K = self.layout.gain_matrix(self.z, k, g)
        if K is None:
            return np.zeros((self.layout.n_u, self.layout.n_x))
        return np.asarray(K, dtype=float)

    def cut(self, kc: int, g: int = 0) -> tuple[Halfspace, float]:
        sl = self.layout.cut_slice(kc, g)
        block = np.asarray(self.z[sl], dtype=float)
        bp = self.tree.branches[(kc, g)]
        return Halfspace(a=block[:-1], b=float(block[-1])), float(bp.alpha)

    def max_violation(self) -> float:
        if self.residuals.size == 0:
            return 0.0
        return float(max(0.0, self.residuals.max()))


def extract_solution(transcribed: TranscribedOcp, z,
                     result=None) -> OcpSolution:
    spec, layout = transcribed.spec, transcribed.layout
    zf = np.asarray([float(v) for v in z])
    x0 = [float(v) for v in transcribed.x_init]
    cost, res, tree = _evaluate(spec, layout, list(zf), x0)
    return OcpSolution(spec=spec, layout=layout,
                       x_init=transcribed.x_init, z=zf, tree=tree,
                       objective=float(cost),
                       residuals=np.asarray(res, dtype=float),
                       labels=transcribed.problem.labels, result=result)


def shift_candidate(sol: OcpSolution, observed_x, terminal_gain=None,
                    terminal_input=None, tol: float = 1e-6) -> np.ndarray:
    """Time-shifted decision vector for the next solve.

    Commits to the side of the first cut containing ``observed_x``, shifts
    that subtree's inputs, gains and cuts one step earlier, appends the
    terminal policy ``u = terminal_input + terminal_gain x`` at the last
    stage, and places a fresh final cut tangent to the shifted tube (its kept
    side reproduces the tube exactly, the mirrored side collapses under the
    clamp). Raises :class:`NoSideError` when ``observed_x`` lies outside the
    one-step-ahead ellipsoid of the previous solution beyond ``tol``.
    """
    spec, layout = sol.spec, sol.layout
    n_x, n_u = layout.n_x, layout.n_u
    N, n_r = layout.horizon, layout.robust_horizon
    x_obs = np.asarray([float(v) for v in observed_x])
    if terminal_gain is None:
        terminal_gain = np.zeros((n_u, n_x))
    terminal_gain = np.asarray(terminal_gain, dtype=float)
    terminal_input = np.zeros(n_u) if terminal_input is None \
        else np.asarray(terminal_input, dtype=float)

    if n_r >= 1:
        bp = sol.tree.branches[(1, 0)]
        step_ell = Ellipsoid(shape=SymPsdMatrix(np.asarray(bp.shape, float)),
                             center=np.asarray(bp.center, float))
        a1 = np.asarray(bp.a, float)
        side_val = float(a1 @ x_obs - float(bp.b))
        j = 0 if side_val <= 0.0 else 1
    else:
        node1 = sol.tree.node(1, 0)
        step_ell = Ellipsoid(shape=SymPsdMatrix(np.asarray(node1.P, float)),
                             center=np.asarray(node1.xbar, float))
        j = 0
    if not contains(step_ell, x_obs, tol=tol):
        raise NoSideError("observed state is outside the predicted "
                          "one-step ellipsoid")

    if spec.gain_mode != "optimized" and np.any(terminal_gain != 0.0):
        raise ValueError("terminal_gain must be zero when gains are not "
                         "decision variables")
    if spec.gain_mode == "optimized":
        mask_ok = np.zeros((n_u, n_x), dtype=bool)
        for r, c in layout.mask_entries:
            mask_ok[r, c] = True
        if np.any(terminal_gain[~mask_ok] != 0.0):
            raise ValueError("terminal_gain has entries outside the gain "
                             "mask")

    z_prev = sol.z
    z_new = np.zeros(layout.dim)

    def old_group(k_new: int, g_new: int) -> int:
        # new step k_new maps to old step k_new + 1 inside subtree j
        if n_r == 0:
            return 0
        m_new = min(k_new, n_r)
        if k_new + 1 <= n_r:
            return (j << m_new) | g_new
        # the freshly appended cut's side bit is shared: drop it
        return (j << (n_r - 1)) | (g_new >> 1) if n_r >= 1 else 0

    # shifted inputs for steps 0 .. N-2
    for k in range(N - 1):
        for g in range(spec.owners(k)):
            src = layout.input_slice(k + 1, old_group(k, g))
            z_new[layout.input_slice(k, g)] = z_prev[src]
    # shifted gains for steps 1 .. N-2 plus terminal gain at N-1
    if spec.gain_mode == "optimized":
        for k in range(1, N - 1):
            for g in range(spec.owners(k)):
                src = layout.gain_slice(k + 1, old_group(k, g))
                z_new[layout.gain_slice(k, g)] = z_prev[src]
        term_vals = [terminal_gain[r, c] for r, c in layout.mask_entries]
        for g in range(spec.owners(N - 1)):
            z_new[layout.gain_slice(N - 1, g)] = term_vals
    # shifted cuts for steps 1 .. n_r - 1
    for kc in range(1, n_r):
        for g in range(1 << (kc - 1)):
            src = layout.cut_slice(kc + 1, (j << (kc - 1)) | g)
            z_new[layout.cut_slice(kc, g)] = z_prev[src]
    # final cut direction reuses the deepest previous layer within subtree j;
    # the offset needs the candidate's own pre-partition tube, so it is
    # placed tangent after a first pass
    if n_r >= 1:
        for g in range(1 << (n_r - 1)):
            if n_r == 1:
                src = layout.cut_slice(1, 0)
            else:
                src = layout.cut_slice(n_r, (j << (n_r - 2)) | (g >> 1))
            a_dir = z_prev[src][:n_x]
            dst = layout.cut_slice(n_r, g)
            z_new[dst.start:dst.start + n_x] = a_dir
            z_new[dst.start + n_x] = 0.0
        tree_pass = rollout(spec, z_new, x_obs, layout)
        for g in range(1 << (n_r - 1)):
            bp = tree_pass.branches[(n_r, g)]
            a_dir = [float(v) for v in bp.a]
            q = _mat_vec([[float(v) for v in row] for row in bp.shape], a_dir)
            quad = sum(a_dir[i] * q[i] for i in range(n_x))
            radius = sqrt(_cut_root_radicand(quad))
            offset = sum(a_dir[i] * float(bp.center[i]) for i in range(n_x))
            dst = layout.cut_slice(n_r, g)
            z_new[dst.start + n_x] = offset - radius
    # appended stage input: terminal policy applied to the candidate's own
    # nominal states, which are independent of that input
    tree_pass = rollout(spec, z_new, x_obs, layout)
    for g in range(spec.owners(N - 1)):
        x_nom = np.asarray(tree_pass.node(N - 1, g).xbar, float)
        z_new[layout.input_slice(N - 1, g)] = \
            terminal_input + terminal_gain @ x_nom
    return z_new
