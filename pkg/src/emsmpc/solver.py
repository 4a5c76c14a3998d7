"""Augmented-Lagrangian NLP solver with an L-BFGS inner loop.

Solves ``min f(z)`` subject to ``g_i(z) <= 0`` using the standard
inequality-form augmented Lagrangian

    L_rho(z, lam) = f(z) + (rho/2) * sum_i max(0, lam_i/rho + g_i(z))^2
                         - sum_i lam_i^2 / (2 rho)

with multiplier updates ``lam_i <- max(0, lam_i + rho * g_i(z))`` after each
inner minimization. The inner loop is limited-memory BFGS with Armijo
backtracking; on a failed line search the Hessian memory is cleared and the
step retried once from steepest descent before giving up.

Everything is deterministic: no randomness, and (unless a wall-clock budget
is explicitly configured, which sacrifices run-to-run reproducibility) no
time-dependent decisions. Two calls with identical inputs produce bitwise
identical iterates.

Equality constraints are expressed by callers as two opposing inequalities.
Simple bound constraints may be attached to the problem; they are folded into
the inequality residual vector internally.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "KktResidual", "NlpProblem", "NonFiniteObjective", "SolveResult",
    "SolverConfig", "kkt_residual", "solve", "warm_start_from",
]

STATUS_CONVERGED = "Converged"
STATUS_MAX_ITER = "MaxIter"
STATUS_TIME_BUDGET = "TimeBudget"
STATUS_LINE_SEARCH_FAIL = "LineSearchFail"


class NonFiniteObjective(RuntimeError):
    """The objective or residuals are non-finite at the starting point."""


@dataclass
class NlpProblem:
    """Inequality-constrained NLP ``min f(z) s.t. g(z) <= 0`` elementwise.

    ``objective`` and ``residuals`` are values; ``gradient`` and ``jacobian``
    their first derivatives. ``value_and_jac``, when provided, fuses all four
    into one call ``z -> (f, g, grad_f, J_g)`` and is preferred by the solver
    (one tape replay instead of several). ``bounds = (lb, ub)`` entries may be
    ``+-inf``; finite ones are folded into the residual vector internally.
    ``labels`` optionally names each residual row for diagnostics.
    """

    dim: int
    n_res: int
    objective: Callable[[np.ndarray], float]
    residuals: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    value_and_jac: Callable[[np.ndarray], tuple] | None = None
    value_and_vjp: Callable[[np.ndarray, float, np.ndarray], tuple] | None = None
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    labels: tuple | None = None

    def eval_values(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        return float(self.objective(z)), np.asarray(self.residuals(z), float)

    def eval_all(self, z: np.ndarray):
        """``(f, g, grad_f, J)`` at ``z`` via the fused hook when available."""
        if self.value_and_jac is not None:
            f, g, gf, J = self.value_and_jac(z)
            return (float(f), np.asarray(g, float), np.asarray(gf, float),
                    np.asarray(J, float))
        return (float(self.objective(z)), np.asarray(self.residuals(z), float),
                np.asarray(self.gradient(z), float),
                np.asarray(self.jacobian(z), float))

    def weighted_grad(self, z: np.ndarray, w_obj: float,
                      w_res: np.ndarray) -> np.ndarray:
        """``w_obj * grad f + J^T w_res`` without forming the Jacobian.

        Uses the reverse-sweep hook when the problem provides one (cost
        comparable to a value evaluation); otherwise falls back to the full
        Jacobian contraction.
        """
        if self.value_and_vjp is not None:
            _, _, grad = self.value_and_vjp(z, w_obj, w_res)
            return np.asarray(grad, float)
        _, _, gf, J = self.eval_all(z)
        out = w_obj * gf
        if w_res.size:
            out = out + J.T @ w_res
        return out


def _fold_bounds(problem: NlpProblem) -> NlpProblem:
    """Append finite bound rows ``z_i - ub_i`` and ``lb_i - z_i`` to g."""
    lb, ub = problem.bounds
    lb = np.asarray(lb, float)
    ub = np.asarray(ub, float)
    up_idx = np.flatnonzero(np.isfinite(ub))
    lo_idx = np.flatnonzero(np.isfinite(lb))
    n_extra = up_idx.size + lo_idx.size
    if n_extra == 0:
        return NlpProblem(dim=problem.dim, n_res=problem.n_res,
                          objective=problem.objective,
                          residuals=problem.residuals,
                          gradient=problem.gradient,
                          jacobian=problem.jacobian,
                          value_and_jac=problem.value_and_jac,
                          value_and_vjp=problem.value_and_vjp,
                          bounds=None, labels=problem.labels)

    Jb = np.zeros((n_extra, problem.dim))
    for r, i in enumerate(up_idx):
        Jb[r, i] = 1.0
    for r, i in enumerate(lo_idx):
        Jb[up_idx.size + r, i] = -1.0
    cb = np.concatenate([-ub[up_idx], lb[lo_idx]])

    def residuals(z):
        return np.concatenate([problem.residuals(z), Jb @ z + cb])

    def jacobian(z):
        return np.vstack([problem.jacobian(z), Jb])

    fused = None
    if problem.value_and_jac is not None:
        def fused(z):
            f, g, gf, J = problem.value_and_jac(z)
            return f, np.concatenate([g, Jb @ z + cb]), gf, np.vstack([J, Jb])

    fused_vjp = None
    if problem.value_and_vjp is not None:
        n_core = problem.n_res

        def fused_vjp(z, w_obj, w_res):
            f, g, grad = problem.value_and_vjp(z, w_obj, w_res[:n_core])
            grad = np.asarray(grad, float) + Jb.T @ w_res[n_core:]
            return f, np.concatenate([g, Jb @ z + cb]), grad

    labels = None
    if problem.labels is not None:
        extra = tuple(("bound_upper", int(i)) for i in up_idx) + \
                tuple(("bound_lower", int(i)) for i in lo_idx)
        labels = tuple(problem.labels) + extra
    return NlpProblem(dim=problem.dim, n_res=problem.n_res + n_extra,
                      objective=problem.objective, residuals=residuals,
                      gradient=problem.gradient, jacobian=jacobian,
                      value_and_jac=fused, value_and_vjp=fused_vjp,
                      bounds=None, labels=labels)


@dataclass(frozen=True)
class SolverConfig:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-6
    max_outer: int = 30
    max_inner: int = 400
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    violation_shrink: float = 0.25
    lbfgs_memory: int = 10
    armijo_c1: float = 1e-4
    armijo_factor: float = 0.5
    armijo_max_trials: int = 40
    time_budget: float | None = None


@dataclass(frozen=True)
class KktResidual:
    """First-order optimality measures at ``(z, lam)``.

    ``stationarity`` is ``max|grad f + J^T lam|``, ``violation`` the largest
    positive residual, ``complementarity`` ``max|lam_i g_i|``.
    """

    stationarity: float
    violation: float
    complementarity: float

    def satisfied(self, kkt_tol: float, feas_tol: float) -> bool:
        return self.stationarity <= kkt_tol and self.violation <= feas_tol


@dataclass
class SolveResult:
    z: np.ndarray
    multipliers: np.ndarray
    status: str
    objective: float
    kkt: KktResidual
    outer_iterations: int
    inner_iterations: int
    wall_time: float
    history: list = field(default_factory=list)


def kkt_residual(problem: NlpProblem, z: np.ndarray,
                 multipliers: np.ndarray) -> KktResidual:
    if problem.bounds is not None:
        problem = _fold_bounds(problem)
    z = np.asarray(z, float)
    lam = np.asarray(multipliers, float)
    _, g = problem.eval_values(z)
    stat = problem.weighted_grad(z, 1.0, lam)
    return _kkt_measures(g, stat, lam)


def _kkt_measures(g, stat, lam) -> KktResidual:
    viol = 0.0 if g.size == 0 else float(max(0.0, g.max()))
    comp = 0.0 if g.size == 0 else float(np.abs(lam * g).max())
    return KktResidual(stationarity=float(np.abs(stat).max()) if stat.size else 0.0,
                       violation=viol, complementarity=comp)


def warm_start_from(result: SolveResult, z_shift: np.ndarray):
    """Initial point and multipliers for a follow-up solve.

    ``z_shift`` is the caller's shifted primal candidate; multipliers are
    carried over clipped to the nonnegative orthant.
    """
    lam = np.clip(np.asarray(result.multipliers, float), 0.0, np.inf)
    return np.asarray(z_shift, float).copy(), lam


def _al_value(f, g, lam, rho):
    if g.size == 0:
        return f
    t = np.maximum(0.0, lam / rho + g)
    return f + 0.5 * rho * float(t @ t) - float(lam @ lam) / (2.0 * rho)


def _al_grad_at(problem, z, g, lam, rho):
    """Augmented-Lagrangian gradient at ``z`` given residual values ``g``."""
    if g.size == 0:
        return problem.weighted_grad(z, 1.0, g)
    mult = np.maximum(0.0, lam + rho * g)
    return problem.weighted_grad(z, 1.0, mult)


class _InnerState:
    """L-BFGS memory (s, y pairs) with the usual two-loop recursion."""

    def __init__(self, memory: int):
        self.memory = memory
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []

    def clear(self):
        self.s.clear()
        self.y.clear()

    def push(self, s: np.ndarray, y: np.ndarray):
        sy = float(s @ y)
        if sy <= 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            return  # curvature too weak, skip the pair
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.memory:
            self.s.pop(0)
            self.y.pop(0)

    def direction(self, grad: np.ndarray) -> np.ndarray:
        q = grad.copy()
        if not self.s:
            return -q
        alphas = []
        rhos = [1.0 / float(y @ s) for s, y in zip(self.s, self.y)]
        for i in range(len(self.s) - 1, -1, -1):
            a = rhos[i] * float(self.s[i] @ q)
            alphas.append(a)
            q -= a * self.y[i]
        alphas.reverse()
        y_last, s_last = self.y[-1], self.s[-1]
        gamma = float(s_last @ y_last) / float(y_last @ y_last)
        q *= gamma
        for i in range(len(self.s)):
            b = rhos[i] * float(self.y[i] @ q)
            q += (alphas[i] - b) * self.s[i]
        return -q


def _inner_minimize(problem, z, lam, rho, tol, config, deadline, counters):
    """Minimize the augmented Lagrangian at fixed ``(lam, rho)``.

    Returns ``(z, status)`` where status is None (tolerance reached or
    iteration cap) or a terminal failure string.
    """
    mem = _InnerState(config.lbfgs_memory)
    f, g = problem.eval_values(z)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteObjective("objective or residuals non-finite at the "
                                 "inner starting point")
    val = _al_value(f, g, lam, rho)
    grad = _al_grad_at(problem, z, g, lam, rho)
    restarted = False

    for _ in range(config.max_inner):
        if float(np.abs(grad).max()) <= tol:
            return z, None
        if deadline is not None and time.monotonic() > deadline:
            return z, STATUS_TIME_BUDGET
        d = mem.direction(grad)
        slope = float(d @ grad)
        if slope >= 0.0:
            mem.clear()
            d = -grad
            slope = -float(grad @ grad)

        step = 1.0
        accepted = False
        for _trial in range(config.armijo_max_trials):
            z_new = z + step * d
            f_new, g_new = problem.eval_values(z_new)
            counters["evals"] += 1
            val_new = _al_value(f_new, g_new, lam, rho)
            if np.isfinite(val_new) and \
                    val_new <= val + config.armijo_c1 * step * slope:
                accepted = True
                break
            step *= config.armijo_factor
        if not accepted:
            if restarted or not mem.s:
                return z, STATUS_LINE_SEARCH_FAIL
            mem.clear()
            restarted = True
            continue

        grad_new = _al_grad_at(problem, z_new, g_new, lam, rho)
        mem.push(z_new - z, grad_new - grad)
        z, val, grad = z_new, val_new, grad_new
        counters["inner"] += 1
    return z, None


def solve(problem: NlpProblem, z0: Sequence[float],
          config: SolverConfig | None = None,
          multipliers0: np.ndarray | None = None) -> SolveResult:
    """Run the augmented-Lagrangian loop from ``z0``.

    ``multipliers0`` warm-starts the duals (see :func:`warm_start_from`).
    The returned multipliers match the residual vector of ``problem`` as
    given; rows for folded bounds are appended at the end.
    """
    config = config or SolverConfig()
    if problem.bounds is not None:
        problem = _fold_bounds(problem)
    t0 = time.monotonic()
    deadline = None if config.time_budget is None else t0 + config.time_budget

    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (problem.dim,):
        raise ValueError(f"z0 has shape {z.shape}, expected ({problem.dim},)")
    if multipliers0 is None:
        lam = np.zeros(problem.n_res)
    else:
        lam = np.clip(np.asarray(multipliers0, float), 0.0, np.inf).copy()
        if lam.shape != (problem.n_res,):
            raise ValueError("multiplier warm start has wrong length")

    f0, g0 = problem.eval_values(z)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise NonFiniteObjective("objective or residuals non-finite at z0")

    rho = config.rho0
    viol_prev = np.inf
    counters = {"inner": 0, "evals": 0}
    history = []
    status = STATUS_MAX_ITER
    kkt = None

    for outer in range(1, config.max_outer + 1):
        if problem.n_res == 0:
            inner_tol = config.kkt_tol
        else:
            inner_tol = max(config.kkt_tol, 0.1 * (0.1 ** (outer - 1)))
        z, fail = _inner_minimize(problem, z, lam, rho, inner_tol, config,
                                  deadline, counters)
        f, g = problem.eval_values(z)
        lam = np.maximum(0.0, lam + rho * g)
        stat = problem.weighted_grad(z, 1.0, lam)
        kkt = _kkt_measures(g, stat, lam)
        history.append({"outer": outer, "rho": rho, "objective": f,
                        "stationarity": kkt.stationarity,
                        "violation": kkt.violation,
                        "complementarity": kkt.complementarity})
        if kkt.satisfied(config.kkt_tol, config.feas_tol):
            status = STATUS_CONVERGED
            break
        if fail == STATUS_TIME_BUDGET:
            status = STATUS_TIME_BUDGET
            break
        if fail == STATUS_LINE_SEARCH_FAIL:
            status = STATUS_LINE_SEARCH_FAIL
            break
        if kkt.violation > config.feas_tol and \
                kkt.violation > config.violation_shrink * viol_prev:
            rho = min(rho * config.rho_growth, config.rho_max)
        viol_prev = max(kkt.violation, config.feas_tol)

    f_final = float(problem.objective(z))
    return SolveResult(z=z, multipliers=lam, status=status,
                       objective=f_final, kkt=kkt,
                       outer_iterations=len(history),
                       inner_iterations=counters["inner"],
                       wall_time=time.monotonic() - t0, history=history)
