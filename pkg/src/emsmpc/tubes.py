"""Ellipsoidal tube propagation and constraint tightening.

One step of the closed-loop error dynamics maps a shape matrix ``P`` through
``(A + B K) P (A + B K)^T + sigma_eff * Gamma Gamma^T + Omega_P``, where
``(A, B, Gamma)`` is the dynamics linearization at the nominal point,
``K`` the tube feedback gain, ``sigma_eff`` the effective disturbance weight
and ``Omega_P`` an optional outer bound on linearization error (zero by
default; supplying a real bound is the caller's responsibility). The literal
transposed form ``(A+BK)^T P (A+BK)`` is available via
``convention="printed"``. Outputs are symmetrized.

A constraint row ``h(x, u) <= 0`` holds on the whole tube cross-section when
the tightened residual ``h(xbar, ubar) + sqrt(g^T [I; K] P [I; K]^T g + eps)``
is nonpositive, with ``g`` the gradient of ``h`` at the nominal point. The
``eps`` term keeps the square root differentiable when the tube is flat.

The ``_core``-suffixed helpers work on nested lists of generic scalars so the
traced transcription can reuse the exact same formulas; the public functions
wrap them with numpy types.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import DifferentiableFn, Dual, jacobian, sqrt
from .geometry import SymPsdMatrix

__all__ = [
    "DiscreteDynamics", "LinearizedStep", "NonlinearityBound", "ZeroBound",
    "linearize", "propagate_shape", "tighten", "tighten_terminal",
]


@dataclass(frozen=True)
class DiscreteDynamics:
    """Discrete-time step map ``x_next = step(x, u, w)``.

    ``step`` takes three scalar sequences and returns a list of ``n_x``
    scalars; it must be written against :mod:`emsmpc.autodiff` math so it
    evaluates on floats, duals and tracers.
    """

    n_x: int
    n_u: int
    n_w: int
    step: Callable[[Sequence, Sequence, Sequence], list]

    def as_differentiable(self) -> DifferentiableFn:
        """View of the step map as one function of ``(x, u, w)`` stacked."""
        nx, nu = self.n_x, self.n_u

        def evaluator(xs):
            return self.step(xs[:nx], xs[nx:nx + nu], xs[nx + nu:])

        return DifferentiableFn(arity=nx + nu + self.n_w, codomain=nx,
                                evaluator=evaluator)


@dataclass(frozen=True)
class LinearizedStep:
    """Jacobians of a step map at a nominal point (disturbance at zero)."""

    A: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray


class NonlinearityBound:
    """Interface for outer bounds on linearization error.

    ``shape_term`` returns an ``n_x x n_x`` addition to the propagated shape
    (nested lists or None for zero); ``constraint_term`` returns a scalar
    addition to the tightening radicand of one constraint row. Implementations
    must accept generic scalars if used inside a transcription.
    """

    def shape_term(self, P, xbar, ubar):
        raise NotImplementedError

    def constraint_term(self, xbar, ubar):
        raise NotImplementedError


class ZeroBound(NonlinearityBound):
    """Default bound: the linearization is trusted (Omega identically zero)."""

    def shape_term(self, P, xbar, ubar):
        return None

    def constraint_term(self, xbar, ubar):
        return 0.0


def linearize(dyn: DiscreteDynamics, xbar, ubar) -> LinearizedStep:
    """Jacobians ``(A, B, Gamma)`` of the step map at ``(xbar, ubar, 0)``."""
    point = [*xbar, *ubar] + [0.0] * dyn.n_w
    J = jacobian(dyn.as_differentiable(), point)
    nx, nu = dyn.n_x, dyn.n_u
    return LinearizedStep(A=J[:, :nx], B=J[:, nx:nx + nu],
                          Gamma=J[:, nx + nu:])


# generic-scalar matrix helpers (nested lists) ------------------------------

def _mat_zeros(n: int, m: int) -> list[list]:
    return [[0.0] * m for _ in range(n)]


def _mat_vec(M, v):
    return [sum(Mi[j] * v[j] for j in range(len(v))) for Mi in M]


def _closed_loop_matrix(A, B, K):
    """``A + B K`` with ``K`` possibly all-zero rows (falls back to A)."""
    n = len(A)
    m = len(K[0]) if K else 0
    out = [row[:] for row in A]
    for i in range(n):
        Bi = B[i]
        for j in range(m):
            acc = 0.0
            for l in range(len(Bi)):
                acc = acc + Bi[l] * K[l][j]
            out[i][j] = out[i][j] + acc
    return out


def _propagate_core(P, A, B, Gamma, K, sigma_eff, omega_rows, convention):
    """Shape-matrix step on nested lists; returns a symmetric nested list.

    The symmetrized result shares scalar objects across the diagonal, which
    keeps traced tapes small.
    """
    n = len(A)
    M = _closed_loop_matrix(A, B, K)
    if convention == "covariance":
        left, right = M, None  # M P M^T
    elif convention == "printed":
        # M^T P M: reuse the same product with M transposed
        left = [[M[j][i] for j in range(n)] for i in range(n)]
        right = None
    else:
        raise ValueError(f"unknown propagation convention {convention!r}")
    # MP = left @ P; out = MP @ left^T
    MP = [[sum(left[i][l] * P[l][j] for l in range(n)) for j in range(n)]
          for i in range(n)]
    nw = len(Gamma[0]) if Gamma and len(Gamma) else 0
    out = _mat_zeros(n, n)
    for i in range(n):
        for j in range(i, n):
            acc = sum(MP[i][l] * left[j][l] for l in range(n))
            acc2 = sum(MP[j][l] * left[i][l] for l in range(n))
            val = 0.5 * (acc + acc2)
            for l in range(nw):
                val = val + sigma_eff * (Gamma[i][l] * Gamma[j][l])
            if omega_rows is not None:
                val = val + 0.5 * (omega_rows[i][j] + omega_rows[j][i])
            out[i][j] = val
            out[j][i] = val
    return out


RADICAND_SOFTNESS = 1e-12
RADICAND_FLOOR = 1e-300  # keeps sqrt away from 0 where its derivative is 0/0


def _soft_positive(x, eta=RADICAND_SOFTNESS):
    """Smooth positive part ``(x + sqrt(x^2 + eta^2)) / 2``.

    For ``x >= 1e-6`` (every radicand of valid geometry, thanks to the
    ``eps`` regularizer) the relative bias ``eta^2 / (2 x^2)`` is at most
    5e-13 and rounds away entirely beyond 5e-5, so this is numerically the
    identity. Its purpose is the invalid region: while the
    optimizer iterates, a cut placed beyond tangency inverts the branch shape
    and quadratic forms in it go negative; the soft positive part keeps those
    radicands finite and flat instead of producing square roots of negative
    numbers, and removes any incentive to exploit them.
    """
    return 0.5 * (x + sqrt(x * x + eta * eta))


def _tighten_core(g_x, g_u, P, K, eps):
    """Tightening radius from a constraint gradient split into x/u parts.

    Computes ``sqrt(m^T P m + eps)`` with ``m = g_x + K^T g_u``.
    """
    n = len(g_x)
    if K is not None and g_u is not None:
        m = list(g_x)
        for l in range(len(g_u)):
            gl = g_u[l]
            row = K[l]
            for j in range(n):
                m[j] = m[j] + row[j] * gl
    else:
        m = g_x
    Pm = _mat_vec(P, m)
    H = sum(m[j] * Pm[j] for j in range(n))
    return sqrt(_soft_positive(H + eps) + RADICAND_FLOOR)


# public numpy-facing wrappers ----------------------------------------------

def propagate_shape(P: SymPsdMatrix, lin: LinearizedStep, K: np.ndarray | None,
                    sigma_eff: float, omega: np.ndarray | None = None,
                    convention: str = "covariance") -> SymPsdMatrix:
    """One tube step: ``(A+BK) P (A+BK)^T + sigma_eff Gamma Gamma^T + Omega``.

    ``K = None`` means no feedback; ``sigma_eff`` multiplies
    ``Gamma Gamma^T`` as given (callers apply their sigma convention).
    """
    A = lin.A
    M = A if K is None else A + lin.B @ np.asarray(K, dtype=float)
    if convention == "covariance":
        out = M @ P.array @ M.T
    elif convention == "printed":
        out = M.T @ P.array @ M
    else:
        raise ValueError(f"unknown propagation convention {convention!r}")
    out = out + sigma_eff * (lin.Gamma @ lin.Gamma.T)
    if omega is not None:
        out = out + np.asarray(omega, dtype=float)
    return SymPsdMatrix(out)  # constructor symmetrizes


def _grad_xu(h: DifferentiableFn, xbar, ubar):
    point = [*xbar, *ubar]
    nx = len(point) - len(ubar)
    duals = [Dual(float(v), tuple(1.0 if j == i else 0.0
                                  for j in range(len(point))))
             for i, v in enumerate(point)]
    out = h.evaluator(duals)[0]
    if isinstance(out, Dual):
        val, tang = out.value, list(out.tangent)
    else:
        val, tang = float(out), [0.0] * len(point)
    return val, tang[:nx], tang[nx:]


def tighten(h: DifferentiableFn, xbar, ubar, P: SymPsdMatrix,
            K: np.ndarray | None, eps: float = 1e-6) -> float:
    """Tightened residual of one stage row ``h(x, u) <= 0`` over the tube.

    Nonpositive return means the row holds for every state the tube admits
    under the feedback ``K``.
    """
    val, g_x, g_u = _grad_xu(h, xbar, ubar)
    K_rows = None if K is None else np.asarray(K, dtype=float).tolist()
    radius = _tighten_core(g_x, g_u if K_rows is not None else None,
                           P.array.tolist(), K_rows, eps)
    return float(val + radius)


def tighten_terminal(h: DifferentiableFn, xbar, P: SymPsdMatrix,
                     eps: float = 1e-6) -> float:
    """Tightened residual of a terminal row ``h(x) <= 0`` (no input channel)."""
    xs = list(xbar)
    duals = [Dual(float(v), tuple(1.0 if j == i else 0.0
                                  for j in range(len(xs))))
             for i, v in enumerate(xs)]
    out = h.evaluator(duals)[0]
    if isinstance(out, Dual):
        val, g = out.value, list(out.tangent)
    else:
        val, g = float(out), [0.0] * len(xs)
    radius = _tighten_core(g, None, P.array.tolist(), None, eps)
    return float(val + radius)
