"""Scenario-tree transcription: layout, sharing, rollout and shifting."""

import collections

import numpy as np
import pytest

from emsmpc.autodiff import DifferentiableFn
from emsmpc.geometry import SymPsdMatrix
from emsmpc.scenario import (NoSideError, OcpSpec, ParametricOcp,
                             build_layout, extract_solution, residual_labels,
                             rollout, shift_candidate, transcribe)
from emsmpc.solver import SolverConfig, solve
from emsmpc.tubes import DiscreteDynamics

X_BOX = 2.0
U_BOX = 1.5
X_TERM = 1.0


def affine_dynamics():
    return DiscreteDynamics(
        n_x=2, n_u=2, n_w=2,
        step=lambda x, u, w: [0.5 * x[0] + u[0] + w[0],
                              0.5 * x[1] + u[1] + w[1]])


def box_rows():
    rows = []
    for i in range(2):
        rows.append(DifferentiableFn(4, 1,
                                     (lambda i: lambda xs: [xs[i] - X_BOX])(i)))
        rows.append(DifferentiableFn(4, 1,
                                     (lambda i: lambda xs: [-X_BOX - xs[i]])(i)))
    for j in range(2, 4):
        rows.append(DifferentiableFn(4, 1,
                                     (lambda j: lambda xs: [xs[j] - U_BOX])(j)))
        rows.append(DifferentiableFn(4, 1,
                                     (lambda j: lambda xs: [-U_BOX - xs[j]])(j)))
    return tuple(rows)


def terminal_rows():
    rows = []
    for i in range(2):
        rows.append(DifferentiableFn(2, 1,
                                     (lambda i: lambda xs: [xs[i] - X_TERM])(i)))
        rows.append(DifferentiableFn(2, 1,
                                     (lambda i: lambda xs: [-X_TERM - xs[i]])(i)))
    return tuple(rows)


def affine_spec(n_r, horizon=5, gain_mode="zero", weights=1.0):
    cost = DifferentiableFn(4, 1, lambda xs: [
        xs[0] * xs[0] + xs[1] * xs[1]
        + 0.1 * (xs[2] * xs[2] + xs[3] * xs[3])])
    tcost = DifferentiableFn(2, 1, lambda xs: [xs[0] * xs[0] + xs[1] * xs[1]])
    mask = np.ones((2, 2), dtype=bool) if gain_mode == "optimized" else None
    return OcpSpec(dyn=affine_dynamics(), horizon=horizon, robust_horizon=n_r,
                   stage_constraints=box_rows(),
                   terminal_constraints=terminal_rows(),
                   stage_cost=cost, terminal_cost=tcost, sigma=0.1,
                   gain_mode=gain_mode, gain_mask=mask, weights=weights)


# --- spec validation ---


def test_spec_rejects_bad_robust_horizon():
    with pytest.raises(ValueError):
        affine_spec(5, horizon=5)
    with pytest.raises(ValueError):
        affine_spec(-1)


def test_spec_rejects_bad_weights_shape():
    with pytest.raises(ValueError):
        affine_spec(1, weights=np.ones((3, 2)))


def test_spec_requires_mask_for_optimized_gains():
    with pytest.raises(ValueError):
        OcpSpec(dyn=affine_dynamics(), horizon=3, robust_horizon=0,
                stage_constraints=box_rows(),
                terminal_constraints=terminal_rows(),
                stage_cost=DifferentiableFn(4, 1, lambda xs: [xs[0]]),
                terminal_cost=DifferentiableFn(2, 1, lambda xs: [xs[0]]),
                sigma=0.1, gain_mode="optimized", gain_mask=np.ones((3, 3)))


def test_sigma_eff_conventions():
    spec = affine_spec(0)
    assert spec.sigma_eff == pytest.approx(0.01, rel=1e-15)
    linear = affine_spec(0)
    object.__setattr__(linear, "sigma_convention", "linear")
    assert linear.sigma_eff == pytest.approx(0.1, rel=1e-15)


# --- sharing map ---


def test_owner_counts_saturate_at_the_robust_horizon():
    spec = affine_spec(2)
    assert [spec.owners(k) for k in range(6)] == [1, 2, 4, 4, 4, 4]
    assert spec.n_scenarios == 4


def test_scenario_groups_are_prefix_consistent():
    spec = affine_spec(2)
    for s in range(spec.n_scenarios):
        # the group index at step k is the first min(k, n_r) branch bits
        for k in range(6):
            g = spec.scenario_group(k, s)
            assert g == s >> (2 - min(k, 2))
        # moving forward never remaps to a different subtree
        for k in range(5):
            g_now = spec.scenario_group(k, s)
            g_next = spec.scenario_group(k + 1, s)
            assert g_next >> (min(k + 1, 2) - min(k, 2)) == g_now


def test_multiplicity_times_owners_is_scenario_count():
    spec = affine_spec(2)
    for k in range(6):
        total = sum(spec.multiplicity(k, g) for g in range(spec.owners(k)))
        assert total == spec.n_scenarios


def test_group_weight_sums_member_scenarios():
    w = np.arange(24, dtype=float).reshape(6, 4)
    spec = affine_spec(2, weights=w)
    assert spec.group_weight(0, 0) == pytest.approx(w[0].sum())
    assert spec.group_weight(1, 0) == pytest.approx(w[1, :2].sum())
    assert spec.group_weight(1, 1) == pytest.approx(w[1, 2:].sum())
    assert spec.group_weight(5, 3) == pytest.approx(w[5, 3])


# --- layout ---


def test_layout_dimensions_frozen():
    assert build_layout(affine_spec(0)).dim == 10
    assert build_layout(affine_spec(1)).dim == 21
    assert build_layout(affine_spec(2)).dim == 39
    assert build_layout(affine_spec(1, gain_mode="optimized")).dim == 53


def test_layout_slices_do_not_overlap():
    lay = build_layout(affine_spec(2, gain_mode="optimized"))
    seen = np.zeros(lay.dim, dtype=int)
    for key in lay.input_offset:
        seen[lay.input_slice(*key)] += 1
    for key in lay.gain_offset:
        seen[lay.gain_slice(*key)] += 1
    for key in lay.cut_offset:
        seen[lay.cut_slice(*key)] += 1
    assert (seen == 1).all()


def test_layout_stage_zero_gain_is_structural_zero():
    lay = build_layout(affine_spec(1, gain_mode="optimized"))
    assert (0, 0) not in lay.gain_offset
    assert lay.gain_matrix(np.ones(lay.dim), 0, 0) is None
    K = lay.gain_matrix(np.arange(lay.dim, dtype=float), 1, 0)
    assert np.asarray(K).shape == (2, 2)


# --- residual labeling ---


def test_residual_counts_by_category():
    for n_r, stage, term, cuts in ((0, 40, 4, 0), (1, 72, 8, 1),
                                   (2, 120, 16, 3)):
        labels = residual_labels(affine_spec(n_r))
        counts = collections.Counter(l[0] for l in labels)
        assert counts["stage"] == stage
        assert counts["terminal"] == term
        for kind in ("placement_upper", "placement_lower",
                     "norm_upper", "norm_lower"):
            assert counts[kind] == cuts
        tr = transcribe(affine_spec(n_r), [1.0, -0.5])
        assert tr.problem.n_res == len(labels)
        assert tr.problem.labels == labels


def test_stage_labels_come_before_cut_labels_and_are_sorted():
    labels = residual_labels(affine_spec(2))
    stage_part = [l for l in labels if l[0] in ("stage", "terminal")]
    assert labels[:len(stage_part)] == tuple(stage_part)
    ks = [(l[1], l[2]) for l in stage_part if l[0] == "stage"]
    assert ks == sorted(ks)


# --- transcription and rollout agreement ---


def test_objective_equals_scenario_enumeration():
    # tree nodes shared before the split must be counted once per scenario
    for n_r in (0, 1, 2):
        spec = affine_spec(n_r)
        lay = build_layout(spec)
        tr = transcribe(spec, [1.0, -0.5])
        rng = np.random.default_rng(n_r)
        z = lay.default_guess() + 0.1 * rng.normal(size=lay.dim)
        tree = rollout(spec, list(z), [1.0, -0.5], lay)
        acc = 0.0
        for s in range(spec.n_scenarios):
            for k in range(spec.horizon):
                node = tree.node_for_scenario(k, s)
                acc += (node.xbar[0] ** 2 + node.xbar[1] ** 2
                        + 0.1 * (node.u[0] ** 2 + node.u[1] ** 2))
            last = tree.node_for_scenario(spec.horizon, s)
            acc += last.xbar[0] ** 2 + last.xbar[1] ** 2
        assert tr.problem.objective(z) == pytest.approx(acc, rel=1e-12)


def test_shared_prefix_nodes_are_identical_across_scenarios():
    spec = affine_spec(2)
    lay = build_layout(spec)
    rng = np.random.default_rng(8)
    z = lay.default_guess() + 0.05 * rng.normal(size=lay.dim)
    tree = rollout(spec, list(z), [0.4, 0.2], lay)
    # scenarios 0 and 1 share groups through step 1; 0 and 2 only step 0
    assert tree.node_for_scenario(1, 0) is tree.node_for_scenario(1, 1)
    assert tree.node_for_scenario(1, 0) is not tree.node_for_scenario(1, 2)
    assert tree.node_for_scenario(0, 0) is tree.node_for_scenario(0, 3)


def test_rollout_nominal_matches_hand_iteration_single_tube():
    spec = affine_spec(0, horizon=3)
    lay = build_layout(spec)
    rng = np.random.default_rng(2)
    z = 0.3 * rng.normal(size=lay.dim)
    x0 = np.array([1.0, -0.5])
    tree = rollout(spec, list(z), list(x0), lay)
    x = x0.copy()
    for k in range(3):
        u = z[lay.input_slice(k, 0)]
        assert np.allclose(tree.node(k, 0).u, u, rtol=0.0, atol=0.0)
        assert np.allclose(tree.node(k, 0).xbar, x, rtol=1e-15, atol=1e-15)
        x = 0.5 * x + u
    assert np.allclose(tree.node(3, 0).xbar, x, rtol=1e-15, atol=1e-15)


def test_shapes_grow_by_disturbance_injection():
    spec = affine_spec(0, horizon=3)
    lay = build_layout(spec)
    tree = rollout(spec, list(lay.default_guess()), [0.0, 0.0], lay)
    # P_0 = 0, P_{k+1} = 0.25 P_k + 0.01 I for the 0.5 I dynamics
    P = np.zeros((2, 2))
    for k in range(4):
        assert np.allclose(np.asarray(tree.node(k, 0).P, float), P,
                           rtol=1e-14, atol=1e-16)
        P = 0.25 * P + 0.01 * np.eye(2)


def test_tree_serialization_round_trips_psd_shapes():
    # solved trees satisfy the placement rows, so branch shapes are PSD
    spec = affine_spec(1)
    sol, _ = tight_solve(spec, [0.5, -0.1])
    tree = sol.tree
    doc = tree.to_dict()
    assert doc["horizon"] == 5
    assert doc["robust_horizon"] == 1
    for entry in doc["nodes"]:
        n = len(entry["center"])
        P = SymPsdMatrix.from_upper_triangle(n, entry["shape_upper_triangle"])
        assert np.linalg.eigvalsh(P.array).min() >= -1e-10
        node = tree.node(entry["k"], entry["group"])
        assert np.allclose(P.array, np.asarray(node.P, float), rtol=0.0,
                           atol=0.0)
    ks = [(e["k"], e["group"]) for e in doc["nodes"]]
    assert ks == sorted(ks)
    assert len(doc["cuts"]) == 1


# --- solving and shifting ---


def tight_solve(spec, x0, guess=None):
    lay = build_layout(spec)
    tr = transcribe(spec, x0)
    z0 = lay.default_guess() if guess is None else guess
    cfg = SolverConfig(kkt_tol=1e-9, feas_tol=1e-12, max_outer=40,
                       max_inner=800, rho0=10.0)
    res = solve(tr.problem, z0, cfg)
    return extract_solution(tr, res.z, res), res


def test_single_tube_solution_is_feasible_and_regulates():
    sol, res = tight_solve(affine_spec(0), [1.5, -1.0])
    assert res.status == "Converged"
    assert sol.max_violation() <= 1e-9
    assert abs(sol.tree.node(5, 0).xbar[0]) < 0.1
    u0 = sol.first_input()
    assert np.abs(u0).max() <= U_BOX + 1e-9


def test_shift_candidate_exact_on_the_nominal_path_single_tube():
    spec = affine_spec(0)
    sol, res = tight_solve(spec, [1.5, -1.0])
    observed = [float(v) for v in sol.tree.node(1, 0).xbar]
    z_shift = shift_candidate(sol, observed)
    tr_next = transcribe(spec, observed)
    resid = tr_next.problem.residuals(z_shift)
    assert float(np.max(resid)) <= 1e-8


def test_shift_candidate_commits_to_the_observed_side():
    spec = affine_spec(1)
    sol, res = tight_solve(spec, [1.5, -1.0])
    assert sol.max_violation() <= 1e-8
    lay = sol.layout
    bp = sol.tree.branches[(1, 0)]
    a = np.asarray(bp.a, float)
    c = np.asarray(bp.center, float)
    for side in (0, 1):
        # halfway between the pre-partition center and the branch center
        # stays inside the one-step ellipsoid on that branch's side
        xb = np.asarray(sol.tree.node(1, side).xbar, float)
        observed = c + 0.5 * (xb - c)
        j = 0 if float(a @ observed) - float(bp.b) <= 0.0 else 1
        z_shift = shift_candidate(sol, list(observed))
        # the shifted first input is the committed subtree's second input
        committed = np.asarray(sol.z[lay.input_slice(1, j)], float)
        assert np.allclose(z_shift[lay.input_slice(0, 0)], committed,
                           rtol=0.0, atol=0.0)


def test_shift_candidate_rejects_states_outside_the_step_tube():
    spec = affine_spec(0)
    sol, _ = tight_solve(spec, [1.5, -1.0])
    with pytest.raises(NoSideError):
        shift_candidate(sol, [10.0, 10.0])


def test_parametric_bind_reuses_the_tape():
    par = ParametricOcp(lambda x0: affine_spec(1), n_x=2)
    b1 = par.bind([1.0, 0.0])
    b2 = par.bind([0.5, 0.2])
    assert b1.tape is b2.tape
    lay = build_layout(affine_spec(1))
    z = lay.default_guess()
    r1 = b1.problem.residuals(z)
    r2 = b2.problem.residuals(z)
    assert r1.shape == r2.shape
    assert not np.array_equal(r1, r2)
