"""Tube propagation, linearization and constraint tightening."""

import math

import numpy as np
import pytest

from emsmpc.autodiff import DifferentiableFn, sin
from emsmpc.geometry import SymPsdMatrix
from emsmpc.tubes import (DiscreteDynamics, LinearizedStep, ZeroBound,
                          _soft_positive, linearize, propagate_shape, tighten,
                          tighten_terminal)


def double_integrator(dt=0.5):
    def step(x, u, w):
        return [x[0] + dt * x[1] + w[0], x[1] + dt * u[0] + w[1]]

    return DiscreteDynamics(n_x=2, n_u=1, n_w=2, step=step)


# --- linearize ---


def test_linearize_affine_system_exact():
    dyn = double_integrator()
    lin = linearize(dyn, [1.0, 2.0], [0.3])
    assert np.array_equal(lin.A, np.array([[1.0, 0.5], [0.0, 1.0]]))
    assert np.array_equal(lin.B, np.array([[0.0], [0.5]]))
    assert np.array_equal(lin.Gamma, np.eye(2))


def test_linearize_nonlinear_at_point():
    def step(x, u, w):
        return [x[0] * x[1] + u[0], sin(x[0]) + w[0]]

    dyn = DiscreteDynamics(n_x=2, n_u=1, n_w=1, step=step)
    lin = linearize(dyn, [0.7, -1.2], [0.0])
    assert np.allclose(lin.A, [[-1.2, 0.7], [math.cos(0.7), 0.0]], rtol=1e-15)
    assert np.allclose(lin.B, [[1.0], [0.0]], rtol=0.0, atol=0.0)
    assert np.allclose(lin.Gamma, [[0.0], [1.0]], rtol=0.0, atol=0.0)


# --- propagate_shape ---


def test_propagation_oracle_exact_dyadic():
    # all entries dyadic, so the update is exact in floating point
    lin = LinearizedStep(A=np.array([[0.5, 0.0], [0.0, 0.25]]),
                         B=np.array([[1.0], [0.5]]),
                         Gamma=np.eye(2))
    P = SymPsdMatrix(np.diag([1.0, 4.0]))
    K = np.array([[0.25, 0.5]])
    out = propagate_shape(P, lin, K, 0.25, omega=np.diag([0.5, 0.5]))
    ref = np.array([[2.3125, 1.09375], [1.09375, 1.765625]])
    assert np.array_equal(out.array, ref)


def test_propagation_without_feedback_drops_bk():
    lin = LinearizedStep(A=np.array([[0.5, 0.0], [0.0, 0.25]]),
                         B=np.array([[1.0], [0.5]]),
                         Gamma=np.eye(2))
    P = SymPsdMatrix(np.diag([1.0, 4.0]))
    out = propagate_shape(P, lin, None, 0.25)
    ref = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert np.array_equal(out.array, ref)


def test_propagation_pure_disturbance():
    lin = LinearizedStep(A=np.zeros((2, 2)), B=np.zeros((2, 1)),
                         Gamma=np.array([[1.0, 0.0], [0.0, 2.0]]))
    out = propagate_shape(SymPsdMatrix(np.zeros((2, 2))), lin, None, 1.0)
    assert np.array_equal(out.array, np.diag([1.0, 4.0]))


def test_propagation_printed_convention_transposes():
    A = np.array([[1.0, 0.5], [0.0, 1.0]])
    lin = LinearizedStep(A=A, B=np.zeros((2, 1)), Gamma=np.zeros((2, 1)))
    P = SymPsdMatrix(np.diag([1.0, 2.0]))
    cov = propagate_shape(P, lin, None, 0.0, convention="covariance")
    prt = propagate_shape(P, lin, None, 0.0, convention="printed")
    assert np.allclose(cov.array, A @ P.array @ A.T)
    assert np.allclose(prt.array, A.T @ P.array @ A)
    with pytest.raises(ValueError):
        propagate_shape(P, lin, None, 0.0, convention="other")


def test_propagation_output_is_symmetric_psd():
    rng = np.random.default_rng(12)
    for _ in range(20):
        n, m = 3, 2
        M = rng.normal(size=(n, n))
        P = SymPsdMatrix(M @ M.T)
        lin = LinearizedStep(A=rng.normal(size=(n, n)),
                             B=rng.normal(size=(n, m)),
                             Gamma=rng.normal(size=(n, n)))
        K = rng.normal(size=(m, n))
        out = propagate_shape(P, lin, K, float(rng.uniform(0.0, 2.0)))
        assert np.array_equal(out.array, out.array.T)
        assert np.linalg.eigvalsh(out.array).min() >= -1e-10


def test_propagation_monotone_in_sigma():
    # a larger disturbance weight can only inflate the shape
    lin = LinearizedStep(A=np.eye(2) * 0.9, B=np.zeros((2, 1)),
                         Gamma=np.array([[1.0], [0.3]]))
    P = SymPsdMatrix(np.diag([0.2, 0.4]))
    small = propagate_shape(P, lin, None, 0.1)
    large = propagate_shape(P, lin, None, 0.7)
    assert np.linalg.eigvalsh(large.array - small.array).min() >= -1e-12


# --- soft positive part ---


def test_soft_positive_identity_in_valid_region():
    # beyond ~5e-5 the bias rounds away entirely
    for x in (1e-4, 1e-3, 0.5, 7.0):
        assert _soft_positive(x) == x
    # at the eps floor the relative bias is eta^2 / (2 x^2) = 5e-13
    assert _soft_positive(1e-6) == pytest.approx(1e-6, rel=1e-12)
    assert _soft_positive(1e-6) != 1e-6


def test_soft_positive_flattens_negatives():
    for x in (-1e-3, -1.0, -50.0):
        v = _soft_positive(x)
        assert 0.0 < v < 1e-12 or v < 1e-9
        assert np.isfinite(v)


# --- tightening ---


def test_tighten_affine_row_closed_form():
    # h(x, u) = x0 + 2 x1 - 1, P = diag(1, 4), no feedback:
    # residual = h + sqrt(17 + eps)
    h = DifferentiableFn(3, 1, lambda xs: [xs[0] + 2.0 * xs[1] - 1.0])
    P = SymPsdMatrix(np.diag([1.0, 4.0]))
    got = tighten(h, [0.1, 0.2], [0.0], P, None, eps=1e-6)
    ref = (0.1 + 0.4 - 1.0) + math.sqrt(17.0 + 1e-6)
    assert got == pytest.approx(ref, rel=1e-15)


def test_tighten_with_feedback_uses_effective_gradient():
    # h depends on u only; K folds it back onto the state uncertainty
    h = DifferentiableFn(3, 1, lambda xs: [xs[2] - 1.0])
    P = SymPsdMatrix(np.diag([1.0, 4.0]))
    K = np.array([[0.5, -0.25]])
    got = tighten(h, [0.0, 0.0], [0.3], P, K, eps=0.0)
    m = np.array([0.5, -0.25])
    ref = (0.3 - 1.0) + math.sqrt(float(m @ P.array @ m))
    assert got == pytest.approx(ref, rel=1e-14)


def test_tighten_zero_tube_leaves_only_the_softness_radius():
    h = DifferentiableFn(3, 1, lambda xs: [xs[0] - 2.0])
    P = SymPsdMatrix(np.zeros((2, 2)))
    got = tighten(h, [1.0, 0.0], [0.0], P, None, eps=0.0)
    # a zero radicand is softened to eta/2 = 5e-13, so the radius floor
    # is sqrt(5e-13); with the default eps = 1e-6 it is invisible
    assert got == pytest.approx(-1.0 + math.sqrt(5e-13), rel=1e-12)
    with_eps = tighten(h, [1.0, 0.0], [0.0], P, None)
    assert with_eps == pytest.approx(-1.0 + math.sqrt(1e-6), rel=1e-9)


def test_tighten_terminal_matches_stage_form():
    h_t = DifferentiableFn(2, 1, lambda xs: [xs[1] - 0.5])
    h_s = DifferentiableFn(3, 1, lambda xs: [xs[1] - 0.5])
    P = SymPsdMatrix(np.array([[0.3, 0.1], [0.1, 0.2]]))
    a = tighten_terminal(h_t, [0.0, 0.1], P)
    b = tighten(h_s, [0.0, 0.1], [0.0], P, None)
    assert a == pytest.approx(b, rel=1e-15)


def test_tighten_is_conservative_over_samples():
    # tightened row nonpositive implies the row holds on sampled tube states
    rng = np.random.default_rng(3)
    h = DifferentiableFn(3, 1, lambda xs: [xs[0] + 0.5 * xs[1] - 2.0])
    M = rng.normal(size=(2, 2))
    P = SymPsdMatrix(0.3 * (M @ M.T))
    xbar = np.array([0.5, -0.2])
    margin = tighten(h, xbar, [0.0], P, None)
    L = np.linalg.cholesky(P.array + 1e-15 * np.eye(2))
    for _ in range(500):
        d = rng.normal(size=2)
        d /= np.linalg.norm(d)
        x = xbar + L @ d
        assert x[0] + 0.5 * x[1] - 2.0 <= margin + 1e-9


def test_zero_bound_contributes_nothing():
    zb = ZeroBound()
    assert zb.shape_term(None, None, None) is None
    assert zb.constraint_term(None, None) == 0.0


def test_dynamics_as_differentiable_stacks_arguments():
    dyn = double_integrator()
    fn = dyn.as_differentiable()
    assert fn.arity == 5
    assert fn.codomain == 2
    out = fn.evaluator([1.0, 2.0, 0.4, 0.1, -0.1])
    assert out == pytest.approx([1.0 + 1.0 + 0.1, 2.0 + 0.2 - 0.1])
