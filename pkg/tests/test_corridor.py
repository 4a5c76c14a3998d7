"""Corridor case study: dynamics, costs, controllers and batch plumbing."""

import dataclasses

import numpy as np
import pytest

from emsmpc.corridor import (CONTROLLERS, IDX_HX, IDX_HY, IDX_RV, IDX_RX,
                             IDX_RY, CaseController, CaseParams, RunRecord,
                             batch_experiment, build_case_spec,
                             closed_loop_cost_step, closed_loop_run,
                             cold_start_guess, continuous_dynamics,
                             controller_structure, gain_mask, make_dynamics,
                             open_loop_solution, rk4_step,
                             sample_disturbance)
from emsmpc.scenario import build_layout, transcribe


@pytest.fixture(scope="module")
def params():
    return CaseParams()


# --- parameters ---


def test_default_parameters_frozen(params):
    p = params
    assert (p.dt, p.horizon, p.sim_steps) == (0.5, 10, 16)
    assert p.v_ref == 1.5
    assert p.human_velocity == (-0.6, 0.0)
    assert p.sigma_w == 0.4
    assert (p.delta_safe, p.y_max, p.v_max, p.omega_max) == (0.3, 1.3, 2.0,
                                                             1.0)
    assert p.q_weights == (50.0, 50.0, 0.0, 2.0, 0.0, 0.0, 0.0)
    assert p.r_weights == (2.0, 2.0)
    assert p.x_init == (-2.0, 0.0, 0.0, 1.6, 0.0, 3.5, 0.0)
    assert p.sigma_convention == "squared"


def test_params_dict_round_trip(params):
    back = CaseParams.from_dict(params.to_dict())
    assert back == params


def test_params_reject_unknown_keys():
    with pytest.raises(ValueError):
        CaseParams.from_dict({"dt": 0.5, "not_a_parameter": 1})


def test_controller_structure_names():
    assert controller_structure("single_tube_K0") == (0, "zero")
    assert controller_structure("single_tube_Kopt") == (0, "optimized")
    assert controller_structure("multistage_K0") == (1, "zero")
    assert controller_structure("multistage_Kopt") == (1, "optimized")
    with pytest.raises(ValueError):
        controller_structure("triple_tube_K0")


def test_gain_mask_reads_speed_and_human_position():
    mask = gain_mask()
    assert mask.shape == (2, 7)
    expected = np.zeros((2, 7), dtype=bool)
    expected[:, [IDX_RV, IDX_HX, IDX_HY]] = True
    assert np.array_equal(mask, expected)


# --- dynamics oracles ---


def test_rk4_straight_line_is_exact(params):
    # theta = omega = 0 and constant acceleration make the flow polynomial,
    # where one RK4 step is exact: rx advances v0 dt + a dt^2 / 2
    f = continuous_dynamics(params)
    x = list(params.x_init)
    out = rk4_step(f, x, [0.1, 0.0], [0.0, 0.0], params.dt)
    assert out[IDX_RX] == pytest.approx(-1.1875, abs=1e-15)
    assert out[IDX_RY] == pytest.approx(0.0, abs=0.0)
    assert out[IDX_RV] == pytest.approx(1.65, abs=1e-15)
    assert out[IDX_HX] == pytest.approx(3.2, abs=1e-15)
    assert out[IDX_HY] == pytest.approx(0.0, abs=0.0)


def test_rk4_disturbance_enters_human_channel(params):
    f = continuous_dynamics(params)
    x = list(params.x_init)
    base = np.array(rk4_step(f, x, [0.0, 0.0], [0.0, 0.0], params.dt))
    moved = np.array(rk4_step(f, x, [0.0, 0.0], [0.2, -0.1], params.dt))
    diff = moved - base
    assert diff[IDX_HX] == pytest.approx(0.2 * params.dt, rel=1e-14)
    assert diff[IDX_HY] == pytest.approx(-0.1 * params.dt, rel=1e-14)
    assert np.abs(diff[:IDX_HX]).max() == 0.0


def test_rk4_order_of_accuracy(params):
    # halving dt must shrink the one-step defect by about 2^5
    f = continuous_dynamics(params)
    x = [0.0, 0.0, 0.3, 1.2, 0.4, 2.0, 0.1]
    u, w = [0.5, -0.3], [0.05, -0.02]

    def defect(dt):
        coarse = np.array(rk4_step(f, x, u, w, dt))
        half = rk4_step(f, x, u, w, dt / 2.0)
        fine = np.array(rk4_step(f, half, u, w, dt / 2.0))
        return float(np.linalg.norm(coarse - fine))

    ratio = defect(0.5) / defect(0.25)
    assert 25.0 <= ratio <= 40.0


def test_make_dynamics_matches_rk4(params):
    dyn = make_dynamics(params)
    assert (dyn.n_x, dyn.n_u, dyn.n_w) == (7, 2, 2)
    f = continuous_dynamics(params)
    x = [0.1, -0.2, 0.4, 1.0, 0.2, 2.0, 0.3]
    u, w = [0.3, 0.1], [0.1, -0.3]
    assert dyn.step(x, u, w) == pytest.approx(
        rk4_step(f, x, u, w, params.dt), rel=0.0, abs=0.0)


def test_disturbance_samples_bounded_and_deterministic(params):
    for seed in range(5):
        for t in range(16):
            w = sample_disturbance(seed, t, params.sigma_w)
            assert np.linalg.norm(w) <= params.sigma_w + 1e-12
            again = sample_disturbance(seed, t, params.sigma_w)
            assert np.array_equal(w, again)
    a = sample_disturbance(0, 0, params.sigma_w)
    b = sample_disturbance(0, 1, params.sigma_w)
    assert not np.array_equal(a, b)


# --- stage cost ---


def test_cost_step_oracle_at_start(params):
    x = np.array(params.x_init)
    got = closed_loop_cost_step(params, x, np.zeros(2))
    # only the speed deviation contributes: 2 (1.6 - 1.5)^2 = 0.02
    assert got == pytest.approx(0.02, rel=1e-12)


def test_cost_step_anchors_at_own_position(params):
    # moving the whole scene down-corridor must not change the cost
    x = np.array(params.x_init)
    shifted = x.copy()
    shifted[IDX_RX] += 5.0
    shifted[IDX_HX] += 5.0
    u = np.array([0.3, -0.2])
    assert closed_loop_cost_step(params, shifted, u) == pytest.approx(
        closed_loop_cost_step(params, x, u), rel=1e-12)


def test_cost_step_penalizes_lateral_offset_speed_and_input(params):
    x = np.array(params.x_init)
    x[IDX_RY] = 0.2
    x[IDX_RV] = 1.5
    u = np.array([0.5, -0.1])
    ref = 50.0 * 0.2 ** 2 + 2.0 * (0.5 ** 2 + 0.1 ** 2)
    assert closed_loop_cost_step(params, x, u) == pytest.approx(ref,
                                                                rel=1e-12)


# --- spec wiring ---


def test_case_spec_structure(params):
    spec = build_case_spec(params, "multistage_K0", np.array(params.x_init))
    assert spec.horizon == 10
    assert spec.robust_horizon == 1
    assert spec.sigma_eff == pytest.approx(0.16, rel=1e-15)
    assert len(spec.stage_constraints) == 7
    assert len(spec.terminal_constraints) == 8
    assert len(spec.stage_cost) == 10


def test_layout_dimensions_per_controller(params):
    dims = {}
    for name in CONTROLLERS:
        spec = build_case_spec(params, name, np.array(params.x_init))
        dims[name] = build_layout(spec).dim
    # 10 steps of 2 inputs; the split doubles steps 1..9; cuts add 8;
    # optimized gains add 6 masked entries per owned step past 0
    assert dims["single_tube_K0"] == 20
    assert dims["multistage_K0"] == 20 + 18 + 8
    assert dims["single_tube_Kopt"] == 20 + 9 * 6
    assert dims["multistage_Kopt"] == 46 + (9 + 9) * 6


def test_cold_start_guess_matches_layout(params):
    for name in ("single_tube_K0", "multistage_Kopt"):
        spec = build_case_spec(params, name, np.array(params.x_init))
        lay = build_layout(spec)
        z = cold_start_guess(params, lay, np.array(params.x_init))
        assert z.shape == (lay.dim,)
        tr = transcribe(spec, np.array(params.x_init))
        r = tr.problem.residuals(z)
        assert np.isfinite(r).all()


# --- gradients against finite differences ---


def test_transcribed_gradients_match_fd(params):
    spec = build_case_spec(params, "multistage_K0", np.array(params.x_init))
    lay = build_layout(spec)
    tr = transcribe(spec, np.array(params.x_init))
    z0 = cold_start_guess(params, lay, np.array(params.x_init))
    rng = np.random.default_rng(0)
    step = 1e-6
    for _ in range(5):
        z = z0 + 0.01 * rng.normal(size=lay.dim)
        w = rng.normal(size=tr.problem.n_res)
        grad = tr.problem.weighted_grad(z, 1.0, w)

        def merit(zz):
            f, g = tr.problem.eval_values(zz)
            return float(f + w @ g)

        idx = rng.choice(lay.dim, size=12, replace=False)
        for j in idx:
            e = np.zeros(lay.dim)
            e[j] = step
            fd = (merit(z + e) - merit(z - e)) / (2.0 * step)
            assert grad[j] == pytest.approx(fd, rel=2e-6, abs=2e-6)


# --- closed loop ---


@pytest.fixture(scope="module")
def k0_run(params):
    return closed_loop_run(params, "single_tube_K0", 0)


def test_closed_loop_shapes_and_safety(params, k0_run):
    rec = k0_run
    assert rec.states.shape == (17, 7)
    assert rec.inputs.shape == (16, 2)
    assert rec.distances.shape == (17,)
    assert len(rec.statuses) == 16
    assert rec.violations == 0
    assert rec.min_distance >= params.delta_safe - 1e-6
    assert rec.closed_loop_cost == pytest.approx(rec.stage_costs.sum(),
                                                 rel=1e-15)


def test_closed_loop_is_seed_deterministic(params, k0_run):
    again = closed_loop_run(params, "single_tube_K0", 0)
    assert np.array_equal(again.states, k0_run.states)
    assert np.array_equal(again.inputs, k0_run.inputs)
    assert again.fingerprint() == k0_run.fingerprint()


def test_fingerprint_separates_seeds_and_controllers(params, k0_run):
    other = closed_loop_run(params, "single_tube_K0", 1)
    assert other.fingerprint() != k0_run.fingerprint()


def test_run_record_csv_layout(params, k0_run):
    rows = k0_run.csv_rows(params.dt)
    header = RunRecord.csv_header()
    assert header[0] == "time"
    assert len(rows) == 17
    assert all(len(r) == len(header) for r in rows)
    assert rows[0][0] == 0.0
    assert rows[-1][0] == pytest.approx(16 * params.dt)
    # terminal row carries the final state and no input
    assert rows[-1][9] == ""
    assert rows[-1][1] == pytest.approx(k0_run.states[-1][0])


def test_controller_reset_clears_warm_state(params):
    ctrl = CaseController(params, "single_tube_K0")
    a = closed_loop_run(params, "single_tube_K0", 2, controller=ctrl)
    b = closed_loop_run(params, "single_tube_K0", 2, controller=ctrl)
    assert a.fingerprint() == b.fingerprint()


def test_open_loop_multistage_splits_opposite(params):
    sol, res = open_loop_solution(params, "multistage_K0")
    assert res.status == "Converged" or sol.max_violation() <= 1e-6
    ys = np.array([[sol.tree.node(k, g).xbar[IDX_RY] for g in (0, 1)]
                   for k in range(2, 11)])
    k_opposite = [k for k, (y0, y1) in enumerate(ys, start=2)
                  if np.sign(y0) != 0 and np.sign(y0) == -np.sign(y1)]
    assert k_opposite, "branches never take opposite lateral sides"


def test_batch_experiment_summary_and_fingerprint(params):
    fast = dataclasses.replace(params, sim_steps=3)
    batch = batch_experiment(fast, controllers=("single_tube_K0",),
                             n_runs=2, base_seed=0)
    rows = batch.summary()
    assert len(rows) == 1
    assert set(rows[0]) == {"controller", "mean_cost", "violations",
                            "mean_solve_time_s"}
    again = batch_experiment(fast, controllers=("single_tube_K0",),
                             n_runs=2, base_seed=0)
    assert batch.fingerprint() == again.fingerprint()


def test_batch_summary_csv_written(tmp_path, params):
    fast = dataclasses.replace(params, sim_steps=2)
    batch = batch_experiment(fast, controllers=("single_tube_K0",),
                             n_runs=1, base_seed=0)
    path = tmp_path / "summary.csv"
    batch.write_summary_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "controller,mean_cost,violations,mean_solve_time_s"
    assert text[1].startswith("single_tube_K0,")
