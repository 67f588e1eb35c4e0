"""SQP collocation solver checks: oracles, constraints, controllers."""

import numpy as np
import pytest
from scipy import optimize

from tailquad import dynamics as dyn
from tailquad import nmpc


@pytest.fixture(scope="module")
def model():
    return dyn.RobotModel()


def standing_state(model, height=0.33):
    s = dyn.RobotState.zero(height=height)
    return s.as_vector()


def standing_feet(model, n):
    feet = model.leg_base_offsets.copy()
    feet[:, 2] = 0.0
    return np.tile(feet, (n, 1, 1))


def static_input(model, x, feet):
    """Static gravity-balancing input solved by least squares (oracle)."""
    base = np.zeros(dyn.NU)
    a0 = dyn.continuous_dynamics(model, x, base, feet)[8:16]
    cols = []
    free = [2, 5, 8, 11, 12, 13]  # vertical GRFs + tail torques
    for idx in free:
        e = base.copy()
        e[idx] += 1.0
        cols.append(dyn.continuous_dynamics(model, x, e, feet)[8:16] - a0)
    sol, *_ = np.linalg.lstsq(np.array(cols).T, -a0, rcond=None)
    u = base.copy()
    u[free] = sol
    return u


def implicit_rollout(model, x0, us, feet, durations):
    """Feasible trajectory oracle: solve each backward-Euler step exactly."""
    xs = [np.asarray(x0, float)]
    for k in range(len(us)):
        x1 = xs[-1].copy()
        for _ in range(30):  # Newton with the exact Jacobian
            r = dyn.discrete_residual(model, xs[-1], x1, us[k], feet[k], durations[k])
            if np.max(np.abs(r)) < 1e-13:
                break
            _, j1, _ = dyn.dynamics_jacobians(
                model, xs[-1], x1, us[k], feet[k], durations[k]
            )
            x1 = x1 - np.linalg.solve(j1, r)
        xs.append(x1)
    return np.array(xs)


def hold_problem(model, x0, n, contact=True, **kwargs):
    feet = standing_feet(model, n)
    flags = np.full((n, 4), contact)
    x_ref = np.tile(x0, (n + 1, 1))
    durations = np.full(n, 0.04)
    return dict(
        x_initial=x0,
        durations=durations,
        contact_flags=flags,
        foot_positions=feet,
        x_ref=x_ref,
        **kwargs,
    )


class TestSolveCore:
    def test_feasible_reference_is_optimal(self, model):
        # free flight: u = 0 is feasible; the exact rollout as reference
        x0 = dyn.RobotState.zero(height=1.0).as_vector()
        x0[8:11] = [0.3, 0.0, 0.2]
        n = 3
        feet = standing_feet(model, n)
        durations = np.full(n, 0.04)
        us = np.zeros((n, dyn.NU))
        xs = implicit_rollout(model, x0, us, feet, durations)
        prob = nmpc.NmpcProblem(
            model=model,
            x_initial=x0,
            durations=durations,
            contact_flags=np.zeros((n, 4), dtype=bool),
            foot_positions=feet,
            x_ref=xs,
            u_ref=us,
        )
        sol = nmpc.solve(prob)
        assert sol.status is nmpc.SolverStatus.CONVERGED
        assert sol.objective < 1e-6
        np.testing.assert_allclose(sol.us, us, atol=1e-5)

    def test_single_step_matches_slsqp_oracle(self, model):
        # N = 1, tail torques the only inputs (flight): compare to an
        # independent KKT solve of the same equality-constrained program
        x0 = dyn.RobotState.zero(height=1.0).as_vector()
        x0[6:8] = [0.1, -0.2]
        n = 1
        feet = standing_feet(model, n)
        durations = np.array([0.04])
        x_ref = np.tile(x0, (2, 1))
        x_ref[1, 3] = 0.05  # ask for some roll
        prob = nmpc.NmpcProblem(
            model=model,
            x_initial=x0,
            durations=durations,
            contact_flags=np.zeros((1, 4), dtype=bool),
            foot_positions=feet,
            x_ref=x_ref,
            u_ref=np.zeros((1, dyn.NU)),
        )
        sol = nmpc.solve(prob)
        assert sol.status is nmpc.SolverStatus.CONVERGED

        def pack(v):
            x1 = v[:16]
            u = np.zeros(dyn.NU)
            u[12:14] = v[16:]
            return x1, u

        def obj(v):
            x1, u = pack(v)
            return float(
                np.sum((x1 - x_ref[1]) ** 2 * prob.Q) + np.sum(u**2 * prob.R)
            )

        def cons(v):
            x1, u = pack(v)
            return dyn.discrete_residual(model, x0, x1, u, feet[0], 0.04)

        v0 = np.concatenate([x0, np.zeros(2)])
        res = optimize.minimize(
            obj, v0, constraints={"type": "eq", "fun": cons},
            method="SLSQP", options={"maxiter": 300, "ftol": 1e-12},
        )
        assert res.success
        assert sol.objective == pytest.approx(res.fun, abs=1e-6)
        x1o, uo = pack(res.x)
        np.testing.assert_allclose(sol.us[0, 12:14], uo[12:14], atol=1e-3)

    def test_friction_pyramid_saturates(self, model):
        x0 = standing_state(model)
        kw = hold_problem(model, x0, 2)
        kw["x_ref"][:, 8] = 2.0  # demand strong forward acceleration
        prob = nmpc.NmpcProblem(model=model, u_ref=np.zeros((2, dyn.NU)), **kw)
        sol = nmpc.solve(prob)
        assert sol.status is nmpc.SolverStatus.CONVERGED
        mu = prob.friction_coefficient
        gap = np.inf
        for k in range(2):
            for leg in range(4):
                f = sol.us[k, 3 * leg : 3 * leg + 3]
                assert abs(f[0]) <= mu * f[2] + 1e-6
                assert abs(f[1]) <= mu * f[2] + 1e-6
                gap = min(gap, mu * f[2] - abs(f[0]))
        assert gap < 1e-6  # at least one pyramid face active

    def test_infeasible_bounds_reported(self, model):
        x0 = standing_state(model)
        kw = hold_problem(model, x0, 2)
        prob = nmpc.NmpcProblem(
            model=model, u_ref=np.zeros((2, dyn.NU)),
            tail_torque_bound=-1.0, **kw,
        )
        sol = nmpc.solve(prob)
        assert sol.status is nmpc.SolverStatus.INFEASIBLE

    def test_converged_solutions_satisfy_constraints(self, model):
        x0 = standing_state(model)
        kw = hold_problem(model, x0, 3)
        prob = nmpc.NmpcProblem(model=model, u_ref=np.zeros((3, dyn.NU)), **kw)
        sol = nmpc.solve(prob)
        assert sol.status is nmpc.SolverStatus.CONVERGED
        v = nmpc.check_solution(prob, sol)
        assert v["dynamics"] <= 1e-4
        assert v["inequality"] <= 1e-6
        assert v["selection"] <= 1e-6
        assert v["initial"] == 0.0


class TestLegNmpc:
    def test_standing_hold_quarter_weight(self, model):
        # tail hanging straight down: zero tail torque is truly static,
        # so the welded-tail approximation is exact here
        s = dyn.RobotState.zero(height=0.33)
        s.tail_joint_positions = np.array([0.0, -np.pi / 2 + 2e-3])
        x0 = s.as_vector()
        n = 3
        # near-zero input cost: optimum is the static force distribution
        R = np.concatenate([np.full(12, 1e-6), np.full(2, 1e-2)])
        sol = nmpc.leg_nmpc_step(
            model, x0, np.full(n, 0.04), np.ones((n, 4), bool),
            standing_feet(model, n), np.tile(x0, (n + 1, 1)), R=R,
        )
        assert sol.status is nmpc.SolverStatus.CONVERGED
        target = model.weight / 4
        for leg in range(4):
            assert sol.us[0, 3 * leg + 2] == pytest.approx(target, rel=0.05)
        # tail stays welded, torques exactly zero
        assert np.all(sol.us[:, 12:14] == 0.0)

    def test_all_legs_non_contact_zero_grf(self, model):
        x0 = dyn.RobotState.zero(height=1.0).as_vector()
        n = 3
        sol = nmpc.leg_nmpc_step(
            model, x0, np.full(n, 0.04), np.zeros((n, 4), bool),
            standing_feet(model, n), np.tile(x0, (n + 1, 1)),
        )
        assert np.all(sol.us[:, :12] == 0.0)


class TestTailNmpc:
    def test_gravity_compensation_torque(self, model):
        x0 = standing_state(model)
        n = 3
        feet = standing_feet(model, n)
        u_static = static_input(model, x0, feet[0])
        sol = nmpc.tail_nmpc_step(
            model, x0, np.full(n, 0.04), np.ones((n, 4), bool), feet,
            np.tile(x0, (n + 1, 1)), np.tile(u_static[:12], (n, 1)),
        )
        assert sol.status is nmpc.SolverStatus.CONVERGED
        np.testing.assert_allclose(sol.us[0, 12:14], u_static[12:14], atol=0.3)
        # static pitch torque magnitude for the horizontal rod: m g L
        assert abs(u_static[13]) == pytest.approx(
            model.tail_point_mass * model.gravity * model.tail_length, rel=1e-6
        )

    def test_leg_inputs_pinned_bitwise(self, model):
        x0 = standing_state(model)
        n = 3
        feet = standing_feet(model, n)
        plan = np.tile(static_input(model, x0, feet[0])[:12], (n, 1))
        sol = nmpc.tail_nmpc_step(
            model, x0, np.full(n, 0.04), np.ones((n, 4), bool), feet,
            np.tile(x0, (n + 1, 1)), plan,
        )
        assert np.array_equal(sol.us[:, :12], plan)

    def test_flight_roll_correction(self, model):
        x0 = dyn.RobotState.zero(height=1.5).as_vector()
        x0[3] = 0.3  # roll error
        n = 6
        ref = np.tile(x0, (n + 1, 1))
        ref[:, 3] = 0.0
        sol = nmpc.tail_nmpc_step(
            model, x0, np.full(n, 0.04), np.zeros((n, 4), bool),
            standing_feet(model, n), ref, np.zeros((n, 12)),
        )
        assert sol.status is nmpc.SolverStatus.CONVERGED
        assert abs(sol.xs[-1, 3]) < 0.3
        assert np.max(np.abs(sol.us[:, 12:14])) > 0.1  # tail actually works

    def test_zero_torque_bound_pins_tail(self, model):
        x0 = dyn.RobotState.zero(height=1.5).as_vector()
        x0[3] = 0.2
        n = 3
        ref = np.tile(x0, (n + 1, 1))
        ref[:, 3] = 0.0
        sol = nmpc.tail_nmpc_step(
            model, x0, np.full(n, 0.04), np.zeros((n, 4), bool),
            standing_feet(model, n), ref, np.zeros((n, 12)),
            tail_torque_bound=0.0,
        )
        assert sol.status is nmpc.SolverStatus.CONVERGED
        np.testing.assert_allclose(sol.us[:, 12:14], 0.0, atol=1e-9)


class TestCentralized:
    def test_standing_hold_matches_leg_nmpc(self, model):
        s = dyn.RobotState.zero(height=0.33)
        s.tail_joint_positions = np.array([0.0, -np.pi / 2 + 2e-3])
        x0 = s.as_vector()
        n = 3
        args = (
            model, x0, np.full(n, 0.04), np.ones((n, 4), bool),
            standing_feet(model, n), np.tile(x0, (n + 1, 1)),
        )
        leg = nmpc.leg_nmpc_step(*args)
        cen = nmpc.centralized_nmpc_step(*args)
        assert cen.status is nmpc.SolverStatus.CONVERGED
        np.testing.assert_allclose(cen.us[0, :12], leg.us[0, :12], atol=1.0)
        assert cen.solve_time > 0

    def test_vanishing_tail_mass_consistency(self, model):
        light = dyn.RobotModel(tail_point_mass=1e-9)
        x0 = standing_state(light)
        n = 3
        args = (
            light, x0, np.full(n, 0.04), np.ones((n, 4), bool),
            standing_feet(light, n), np.tile(x0, (n + 1, 1)),
        )
        leg = nmpc.leg_nmpc_step(*args)
        assert leg.status is nmpc.SolverStatus.CONVERGED
        tail = nmpc.tail_nmpc_step(*args[:6], leg.us[:, :12])
        assert tail.status is nmpc.SolverStatus.CONVERGED
        # with a massless tail the body prediction must agree
        body = list(range(6)) + list(range(8, 14))
        np.testing.assert_allclose(
            tail.xs[:, body], leg.xs[:, body], atol=1e-6
        )


class TestFeedbackTail:
    def test_zero_error_zero_torque(self):
        x = dyn.RobotState.zero(height=0.3).as_vector()
        np.testing.assert_allclose(nmpc.feedback_tail_step(x), 0.0)

    def test_pure_roll_error_roll_torque_only(self):
        x = dyn.RobotState.zero(height=0.3).as_vector()
        x[3] = 0.1
        tau = nmpc.feedback_tail_step(x)
        assert tau[0] != 0.0
        assert tau[1] == 0.0

    def test_saturation(self):
        x = dyn.RobotState.zero(height=0.3).as_vector()
        x[3] = 10.0
        tau = nmpc.feedback_tail_step(x, torque_bound=10.0)
        assert abs(tau[0]) == 10.0

    def test_negative_gains_rejected(self):
        x = dyn.RobotState.zero(height=0.3).as_vector()
        with pytest.raises(ValueError):
            nmpc.feedback_tail_step(x, kp=-1.0)


class TestWarmstart:
    def test_on_grid_point_shifts_by_one(self):
        warm = nmpc.WarmstartCache(
            xs=np.arange(5)[:, None] * np.ones((5, 16)),
            us=np.arange(4)[:, None] * np.ones((4, 14)),
            grid_anchor=0.04,
            grid_step=0.04,
        )
        durations = nmpc.reanchor_warmstart(warm, 0.04)
        assert durations[0] == pytest.approx(0.04)
        assert warm.grid_anchor == pytest.approx(0.08)
        assert warm.xs[0, 0] == 1.0  # shifted by one element

    def test_cell_midpoint_no_shift(self):
        warm = nmpc.WarmstartCache(
            xs=np.arange(5)[:, None] * np.ones((5, 16)),
            us=np.arange(4)[:, None] * np.ones((4, 14)),
            grid_anchor=0.04,
            grid_step=0.04,
        )
        durations = nmpc.reanchor_warmstart(warm, 0.02)
        assert durations[0] == pytest.approx(0.02)
        assert warm.grid_anchor == pytest.approx(0.04)
        assert warm.xs[0, 0] == 0.0  # unshifted
        np.testing.assert_allclose(durations[1:], 0.04)

    def test_idempotent_within_cell(self):
        warm = nmpc.WarmstartCache(
            xs=np.zeros((5, 16)), us=np.zeros((4, 14)),
            grid_anchor=0.04, grid_step=0.04,
        )
        d1 = nmpc.reanchor_warmstart(warm, 0.01)
        anchor1 = warm.grid_anchor
        d2 = nmpc.reanchor_warmstart(warm, 0.01)
        assert warm.grid_anchor == anchor1
        np.testing.assert_allclose(d1, d2)

    def test_multi_cell_jump(self):
        warm = nmpc.WarmstartCache(
            xs=np.arange(5)[:, None] * np.ones((5, 16)),
            us=np.arange(4)[:, None] * np.ones((4, 14)),
            grid_anchor=0.04, grid_step=0.04,
        )
        durations = nmpc.reanchor_warmstart(warm, 0.11)
        assert warm.grid_anchor == pytest.approx(0.12)
        assert durations[0] == pytest.approx(0.01)
        assert warm.xs[0, 0] == 2.0  # shifted by two elements
