"""Dynamics model checks against independent numerical oracles."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tailquad import dynamics as dyn
from tailquad.errors import ModelValidityError, SingularOrientationError

RNG = np.random.default_rng(42)


@pytest.fixture(scope="module")
def model():
    return dyn.RobotModel()


def random_state(rng, vel_scale=1.0):
    x = np.zeros(16)
    x[0:3] = rng.uniform(-1, 1, 3)
    x[3:6] = rng.uniform([-0.6, -0.6, -np.pi], [0.6, 0.6, np.pi])
    x[6:8] = rng.uniform(-1.3, 1.3, 2)
    x[8:16] = rng.normal(0, vel_scale, 8)
    return x


def rot_zyx_np(theta):
    # scipy "xyz" extrinsic == Rz(yaw) Ry(pitch) Rx(roll)
    return Rotation.from_euler("xyz", theta).as_matrix()


def euler_rate_np(theta):
    r, p = theta[0], theta[1]
    sr, cr, sp, cp = np.sin(r), np.cos(r), np.sin(p), np.cos(p)
    return np.array([[1, 0, -sp], [0, cr, sr * cp], [0, -sr, cr * cp]])


def tail_tip_np(m, q):
    phi = q[6:8]
    rod = (
        Rotation.from_euler("x", phi[0]).as_matrix()
        @ Rotation.from_euler("y", phi[1]).as_matrix()
        @ np.array([-1.0, 0, 0])
    )
    return q[:3] + rot_zyx_np(q[3:6]) @ (m.tail_mount_offset + m.tail_length * rod)


def kinetic_energy_np(m, q, v):
    """Independent kinetic energy in state-velocity coordinates.

    The tail tip velocity is obtained by finite-differencing the tip
    position along the kinematic flow, so it shares no code with the
    model under test.
    """
    pd, om, phid = v[:3], v[3:6], v[6:8]
    h = 1e-7
    thetad = np.linalg.solve(euler_rate_np(q[3:6]), om)
    qd = np.concatenate([pd, thetad, phid])
    tip_plus = tail_tip_np(m, q + h * qd)
    tip_minus = tail_tip_np(m, q - h * qd)
    v_tail = (tip_plus - tip_minus) / (2 * h)
    return (
        0.5 * m.body_mass * pd @ pd
        + 0.5 * om @ m.body_inertia @ om
        + 0.5 * m.tail_point_mass * v_tail @ v_tail
        + 0.5 * m.tail_joint_armature * phid @ phid
    )


def rk4_step(model, x, u, feet, dt):
    k1 = dyn.continuous_dynamics(model, x, u, feet)
    k2 = dyn.continuous_dynamics(model, x + 0.5 * dt * k1, u, feet)
    k3 = dyn.continuous_dynamics(model, x + 0.5 * dt * k2, u, feet)
    k4 = dyn.continuous_dynamics(model, x + dt * k3, u, feet)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


FEET0 = dyn.RobotModel().leg_base_offsets + np.array([0, 0, -0.35])


class TestMassMatrix:
    def test_translation_block_is_total_mass(self, model):
        M = dyn.mass_matrix(model, np.zeros(8))
        np.testing.assert_allclose(
            M[:3, :3], model.total_mass * np.eye(3), atol=1e-12
        )

    def test_symmetry_and_positive_definiteness(self, model):
        for _ in range(200):
            q = random_state(RNG)[:8]
            M = dyn.mass_matrix(model, q)
            assert np.max(np.abs(M - M.T)) < 1e-12
            assert np.min(np.linalg.eigvalsh(M)) > 0

    def test_matches_finite_difference_of_kinetic_energy(self, model):
        for _ in range(10):
            x = random_state(RNG)
            q = x[:8]
            M = dyn.mass_matrix(model, q)
            h = 1e-4
            M_fd = np.zeros((8, 8))
            for i in range(8):
                for j in range(8):
                    ei, ej = np.zeros(8), np.zeros(8)
                    ei[i], ej[j] = h, h
                    M_fd[i, j] = (
                        kinetic_energy_np(model, q, ei + ej)
                        - kinetic_energy_np(model, q, ei - ej)
                        - kinetic_energy_np(model, q, -ei + ej)
                        + kinetic_energy_np(model, q, -ei - ej)
                    ) / (4 * h * h)
            np.testing.assert_allclose(M, M_fd, rtol=1e-4, atol=1e-5)

    def test_singular_orientation_raises(self, model):
        q = np.zeros(8)
        q[4] = np.pi / 2
        with pytest.raises(SingularOrientationError):
            dyn.mass_matrix(model, q)


class TestContinuousDynamics:
    def test_free_fall_com_acceleration(self, model):
        x = dyn.RobotState.zero(height=1.0).as_vector()
        h = 1e-5
        # COM acceleration via second difference of the integrated COM path.
        xm = rk4_step(model, x, np.zeros(14), FEET0, -h)
        xp = rk4_step(model, x, np.zeros(14), FEET0, h)
        com_acc = (
            dyn.center_of_mass(model, xp)
            - 2 * dyn.center_of_mass(model, x)
            + dyn.center_of_mass(model, xm)
        ) / h**2
        np.testing.assert_allclose(com_acc, [0, 0, -model.gravity], atol=1e-4)

    def test_free_fall_angular_momentum_conserved(self, model):
        x = random_state(RNG, vel_scale=0.5)
        x[4] = 0.2  # keep pitch away from the singularity during the horizon

        def ang_mom(xv):
            # About the COM: body spin + tail orbital term, world frame.
            R = rot_zyx_np(xv[3:6])
            L_body = R @ (model.body_inertia @ xv[11:14])
            com = dyn.center_of_mass(model, xv)
            tip = dyn.tail_tip_position(model, xv)
            h = 1e-6
            xv2 = rk4_step(model, xv, np.zeros(14), FEET0, h)
            vtip = (dyn.tail_tip_position(model, xv2) - tip) / h
            vcom = (dyn.center_of_mass(model, xv2) - com) / h
            L_tail = model.tail_point_mass * np.cross(tip - com, vtip - vcom)
            # Armature spin contribution (motor rotors), along joint axes.
            phid = xv[14:16]
            roll_axis = R @ np.array([1.0, 0, 0])
            pitch_axis = R @ (
                Rotation.from_euler("x", xv[6]).as_matrix() @ np.array([0, 1.0, 0])
            )
            L_arm = model.tail_joint_armature * (
                phid[0] * roll_axis + phid[1] * pitch_axis
            )
            L_bodyrate = model.body_mass * np.cross(
                xv[:3] - com, xv[8:11] - vcom
            )
            return L_body + L_tail + L_arm + L_bodyrate

        L0 = ang_mom(x)
        xT = x.copy()
        for _ in range(200):
            xT = rk4_step(model, xT, np.zeros(14), FEET0, 5e-4)
        LT = ang_mom(xT)
        np.testing.assert_allclose(LT, L0, atol=2e-3 * max(1.0, np.linalg.norm(L0)))

    def test_static_balance_under_com(self, model):
        x = dyn.RobotState.zero(height=0.5).as_vector()
        com = dyn.center_of_mass(model, x)
        u = np.zeros(14)
        u[0:3] = [0, 0, model.weight]
        u[13] = model.tail_point_mass * model.gravity * model.tail_length
        feet = FEET0.copy()
        feet[0] = [com[0], com[1], 0.0]  # support directly under the COM
        xdot = dyn.continuous_dynamics(model, x, u, feet)
        np.testing.assert_allclose(xdot[8:11], 0, atol=1e-9)
        np.testing.assert_allclose(xdot[14:16], 0, atol=1e-9)
        # No moment about the COM either: angular acceleration vanishes.
        np.testing.assert_allclose(xdot[11:14], 0, atol=1e-9)


class TestDiscreteResidual:
    def test_equilibrium_residual_zero(self, model):
        x = dyn.RobotState.zero(height=0.5).as_vector()
        com = dyn.center_of_mass(model, x)
        u = np.zeros(14)
        u[0:3] = [0, 0, model.weight]
        u[13] = model.tail_point_mass * model.gravity * model.tail_length
        feet = FEET0.copy()
        feet[0] = [com[0], com[1], 0.0]
        for t in (1e-3, 0.04, 0.5):
            r = dyn.discrete_residual(model, x, x, u, feet, t)
            assert np.linalg.norm(r) < 1e-9

    def test_free_fall_analytic_trajectory(self, model):
        t = 1e-4
        x0 = dyn.RobotState.zero(height=2.0).as_vector()
        x0[8:11] = [0.3, -0.2, 0.1]
        x1 = x0.copy()
        g = model.gravity
        x1[0:3] = x0[0:3] + t * x0[8:11] + 0.5 * t**2 * np.array([0, 0, -g])
        x1[10] = x0[10] - g * t
        r = dyn.discrete_residual(model, x0, x1, np.zeros(14), FEET0, t)
        assert np.linalg.norm(r) < 1e-3

    def test_consistent_step_from_fine_integration(self, model):
        rng = np.random.default_rng(7)
        for _ in range(3):
            x0 = random_state(rng, vel_scale=0.3)
            u = np.zeros(14)
            u[12:14] = rng.normal(0, 0.5, 2)
            t = 0.01
            x1 = x0.copy()
            for _ in range(1000):
                x1 = rk4_step(model, x1, u, FEET0, t / 1000)
            r = dyn.discrete_residual(model, x0, x1, u, FEET0, t)
            scale = max(1.0, np.linalg.norm(x1 - x0))
            assert np.linalg.norm(r) < 1e-2 * scale

    def test_first_order_convergence(self, model):
        rng = np.random.default_rng(3)
        x0 = random_state(rng, vel_scale=0.3)
        u = np.zeros(14)
        norms = []
        steps = [0.02, 0.01, 0.005, 0.0025]
        for t in steps:
            x1 = x0.copy()
            for _ in range(400):
                x1 = rk4_step(model, x1, u, FEET0, t / 400)
            norms.append(np.linalg.norm(dyn.discrete_residual(model, x0, x1, u, FEET0, t)))
        rates = np.log2(np.array(norms[:-1]) / np.array(norms[1:]))
        assert np.all(rates > 0.9), f"convergence rates {rates}"

    def test_nonpositive_duration_rejected(self, model):
        x = dyn.RobotState.zero().as_vector()
        with pytest.raises(ValueError):
            dyn.discrete_residual(model, x, x, np.zeros(14), FEET0, 0.0)


class TestJacobians:
    def test_matches_central_differences(self, model):
        rng = np.random.default_rng(11)
        for _ in range(4):
            x0 = random_state(rng, vel_scale=0.5)
            x1 = x0 + 0.01 * rng.normal(size=16)
            u = rng.normal(0, 5, 14)
            t = 0.04
            jx0, jx1, ju = dyn.dynamics_jacobians(model, x0, x1, u, FEET0, t)
            h = 1e-6

            def fd(fun, z, n):
                J = np.zeros((16, n))
                for k in range(n):
                    e = np.zeros(n)
                    e[k] = h
                    J[:, k] = (fun(z + e) - fun(z - e)) / (2 * h)
                return J

            Jx0_fd = fd(lambda z: dyn.discrete_residual(model, z, x1, u, FEET0, t), x0, 16)
            Jx1_fd = fd(lambda z: dyn.discrete_residual(model, x0, z, u, FEET0, t), x1, 16)
            Ju_fd = fd(lambda z: dyn.discrete_residual(model, x0, x1, z, FEET0, t), u, 14)
            for J, J_fd in ((jx0, Jx0_fd), (jx1, Jx1_fd), (ju, Ju_fd)):
                scale = np.maximum(np.abs(J_fd), 1.0)
                assert np.max(np.abs(J - J_fd) / scale) < 1e-4

    def test_position_rows_independent_of_input(self, model):
        x = dyn.RobotState.zero(height=0.4).as_vector()
        _, _, ju = dyn.dynamics_jacobians(model, x, x, np.zeros(14), FEET0, 0.04)
        np.testing.assert_allclose(ju[:8, :], 0, atol=1e-12)

    def test_grf_columns_enter_linearly(self, model):
        # The velocity-row sensitivity to a leg's GRF is the same whether
        # that leg is loaded or not (inputs enter affinely).
        x = dyn.RobotState.zero(height=0.4).as_vector()
        u0 = np.zeros(14)
        u1 = np.zeros(14)
        u1[2] = 30.0
        _, _, ju0 = dyn.dynamics_jacobians(model, x, x, u0, FEET0, 0.04)
        _, _, ju1 = dyn.dynamics_jacobians(model, x, x, u1, FEET0, 0.04)
        np.testing.assert_allclose(ju0, ju1, atol=1e-9)


class TestEnergy:
    def test_energy_drift_under_free_flight(self, model):
        x = random_state(np.random.default_rng(5), vel_scale=0.5)
        x[4] = 0.1
        e0 = dyn.total_energy(model, x)
        xT = x.copy()
        for _ in range(2000):
            xT = rk4_step(model, xT, np.zeros(14), FEET0, 5e-4)
        eT = dyn.total_energy(model, xT)
        assert abs(eT - e0) / max(abs(e0), 1.0) < 1e-3


class TestModelValidation:
    def test_invalid_masses_rejected(self):
        with pytest.raises(ModelValidityError):
            dyn.RobotModel(body_mass=-1.0)

    def test_asymmetric_inertia_rejected(self):
        bad = np.diag([0.1, 0.2, 0.3])
        bad[0, 1] = 0.05
        with pytest.raises(ModelValidityError):
            dyn.RobotModel(body_inertia=bad)

    def test_state_tail_limit(self, model):
        s = dyn.RobotState.zero()
        s.tail_joint_positions = np.array([2.0, 0.0])
        with pytest.raises(ModelValidityError):
            s.validate(model)

    def test_config_roundtrip(self, tmp_path):
        cfg = tmp_path / "robot.yaml"
        cfg.write_text(
            "body_mass: 9.5\nleg_length: 0.35\nbody_inertia_diag: [0.08, 0.3, 0.31]\n"
        )
        m = dyn.RobotModel.from_config(cfg)
        assert m.body_mass == 9.5
        assert m.leg_length == 0.35
        np.testing.assert_allclose(np.diag(m.body_inertia), [0.08, 0.3, 0.31])

    def test_config_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "robot.yaml"
        cfg.write_text("bogus_key: 1.0\n")
        with pytest.raises(Exception) as exc:
            dyn.RobotModel.from_config(cfg)
        assert "bogus_key" in str(exc.value)

    def test_default_tail_ratios(self, model):
        assert model.tail_point_mass == pytest.approx(0.02 * model.body_mass)
        assert model.tail_length == pytest.approx(2 * model.body_length)
