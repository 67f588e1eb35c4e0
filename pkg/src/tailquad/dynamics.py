"""Centroidal dynamics of a quadruped with a 2-DOF point-mass tail.

The robot is a single rigid body plus a point mass on a massless rod,
mounted at the top center of the body through serial roll and pitch
joints.  Generalized coordinates are

    q = [p_b (3), theta (3, ZYX roll/pitch/yaw), phi (2, tail roll/pitch)]

and the state vector pairs them with velocities

    x = [q, v],   v = [pdot_b (world), omega (body frame), phidot]

Inputs are four world-frame ground reaction forces applied at given foot
positions plus two tail joint torques:

    u = [f_1, f_2, f_3, f_4, tau_1, tau_2]   (14,)

The equations of motion come from Lagrange's equations evaluated with
automatic differentiation (JAX), so the mass matrix, bias forces, and all
Jacobians are exact to machine precision.  The implicit backward-Euler
defect ``discrete_residual`` is what the NMPC collocation enforces.

All public entry points take/return NumPy arrays; JAX is an internal
computation backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import partial
from pathlib import Path

import numpy as np
import yaml

import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

import jax.numpy as jnp

from .errors import ConfigError, ModelValidityError, SingularOrientationError

# Guard band around the ZYX pitch singularity (rad).
PITCH_SINGULARITY_EPS = 1e-3

NX = 16  # state dimension
NU = 14  # input dimension
NQ = 8  # generalized coordinate dimension

# Tail rod points backward along -x in the body frame at phi = 0.
_TAIL_ROD_DIR = np.array([-1.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# model / state / input containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobotModel:
    """Physical parameters of the tailed quadruped.

    Defaults approximate a ~11 kg quadruped with 0.4 m legs and a long
    light tail (2% of body mass, twice the body length); all values are
    overridable from a flat key/value config file via ``from_config``.
    """

    body_mass: float = 11.0
    body_inertia: np.ndarray = field(
        default_factory=lambda: np.diag([0.090, 0.314, 0.330])
    )
    body_length: float = 0.55
    tail_point_mass: float = 0.22
    tail_length: float = 1.1
    tail_mount_offset: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 0.10])
    )
    tail_joint_armature: float = 0.005
    leg_base_offsets: np.ndarray = field(
        default_factory=lambda: np.array(
            [
                [0.22, 0.12, 0.0],  # front-left
                [0.22, -0.12, 0.0],  # front-right
                [-0.22, 0.12, 0.0],  # rear-left
                [-0.22, -0.12, 0.0],  # rear-right
            ]
        )
    )
    leg_length: float = 0.4
    gravity: float = 9.81
    abduction_limit: float = np.deg2rad(40.5)
    friction_coefficient: float = 0.7
    tail_joint_limit: float = np.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "body_inertia", np.asarray(self.body_inertia, float))
        object.__setattr__(
            self, "tail_mount_offset", np.asarray(self.tail_mount_offset, float)
        )
        object.__setattr__(
            self, "leg_base_offsets", np.asarray(self.leg_base_offsets, float)
        )
        for name in ("body_mass", "tail_point_mass", "tail_length", "leg_length"):
            if getattr(self, name) <= 0:
                raise ModelValidityError(f"{name} must be strictly positive")
        inertia = self.body_inertia
        if inertia.shape != (3, 3):
            raise ModelValidityError("body_inertia must be 3x3")
        if not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ModelValidityError("body_inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ModelValidityError("body_inertia must be positive definite")
        if self.tail_joint_armature <= 0:
            # Zero armature makes the roll joint massless when the rod is
            # aligned with the roll axis, which would make M singular.
            raise ModelValidityError("tail_joint_armature must be strictly positive")
        if self.friction_coefficient <= 0:
            raise ModelValidityError("friction_coefficient must be strictly positive")

    @property
    def total_mass(self) -> float:
        return self.body_mass + self.tail_point_mass

    @property
    def weight(self) -> float:
        return self.total_mass * self.gravity

    def params(self) -> dict:
        """Parameter pytree consumed by the JAX kernels (cached)."""
        cached = self.__dict__.get("_params_cache")
        if cached is not None:
            return cached
        params = self._build_params()
        object.__setattr__(self, "_params_cache", params)
        return params

    def _build_params(self) -> dict:
        return {
            "m_b": jnp.asarray(self.body_mass),
            "I_b": jnp.asarray(self.body_inertia),
            "m_t": jnp.asarray(self.tail_point_mass),
            "l_t": jnp.asarray(self.tail_length),
            "r_mount": jnp.asarray(self.tail_mount_offset),
            "g": jnp.asarray(self.gravity),
            "armature": jnp.asarray(self.tail_joint_armature),
        }

    # -- flat key/value config ------------------------------------------------

    _SCALAR_KEYS = (
        "body_mass",
        "body_length",
        "tail_point_mass",
        "tail_length",
        "tail_joint_armature",
        "leg_length",
        "gravity",
        "abduction_limit",
        "friction_coefficient",
        "tail_joint_limit",
    )
    _VECTOR_KEYS = {
        "body_inertia_diag": 3,
        "tail_mount_offset": 3,
    }

    @classmethod
    def from_config(cls, path: str | Path) -> "RobotModel":
        """Load a model from a flat ``key: value`` YAML file (SI units)."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"robot model config not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"robot model config must be a flat mapping: {path}")
        kwargs = {}
        valid = set(cls._SCALAR_KEYS) | set(cls._VECTOR_KEYS)
        for key, value in raw.items():
            if key not in valid:
                raise ConfigError(
                    f"unknown robot model key {key!r}; valid keys: "
                    + ", ".join(sorted(valid))
                )
            if key in cls._VECTOR_KEYS:
                vec = np.asarray(value, float).ravel()
                if vec.size != cls._VECTOR_KEYS[key]:
                    raise ConfigError(
                        f"{key} needs {cls._VECTOR_KEYS[key]} values, got {vec.size}"
                    )
                if key == "body_inertia_diag":
                    kwargs["body_inertia"] = np.diag(vec)
                else:
                    kwargs[key] = vec
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class RobotState:
    """16-dimensional robot state (see module docstring for conventions)."""

    body_position: np.ndarray
    body_orientation: np.ndarray  # ZYX Euler (roll, pitch, yaw), rad
    tail_joint_positions: np.ndarray  # (roll, pitch), rad
    body_linear_velocity: np.ndarray  # world frame, m/s
    body_angular_velocity: np.ndarray  # body frame, rad/s
    tail_joint_velocities: np.ndarray  # rad/s

    def __post_init__(self):
        self.body_position = np.asarray(self.body_position, float).reshape(3)
        self.body_orientation = np.asarray(self.body_orientation, float).reshape(3)
        self.tail_joint_positions = np.asarray(
            self.tail_joint_positions, float
        ).reshape(2)
        self.body_linear_velocity = np.asarray(
            self.body_linear_velocity, float
        ).reshape(3)
        self.body_angular_velocity = np.asarray(
            self.body_angular_velocity, float
        ).reshape(3)
        self.tail_joint_velocities = np.asarray(
            self.tail_joint_velocities, float
        ).reshape(2)

    @classmethod
    def zero(cls, height: float = 0.0) -> "RobotState":
        return cls(
            body_position=np.array([0.0, 0.0, height]),
            body_orientation=np.zeros(3),
            tail_joint_positions=np.zeros(2),
            body_linear_velocity=np.zeros(3),
            body_angular_velocity=np.zeros(3),
            tail_joint_velocities=np.zeros(2),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.body_position,
                self.body_orientation,
                self.tail_joint_positions,
                self.body_linear_velocity,
                self.body_angular_velocity,
                self.tail_joint_velocities,
            ]
        )

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "RobotState":
        x = np.asarray(x, float).reshape(NX)
        return cls(x[0:3], x[3:6], x[6:8], x[8:11], x[11:14], x[14:16])

    def validate(self, model: RobotModel) -> None:
        """Raise if the state violates model-validity invariants."""
        pitch = self.body_orientation[1]
        if abs(pitch) >= np.pi / 2 - PITCH_SINGULARITY_EPS:
            raise SingularOrientationError(
                f"Euler pitch {pitch:.4f} rad is inside the ZYX singularity band"
            )
        limit = model.tail_joint_limit + 1e-9
        if np.any(np.abs(self.tail_joint_positions) > limit):
            raise ModelValidityError(
                f"tail joint positions {self.tail_joint_positions} exceed "
                f"+/-{model.tail_joint_limit:.3f} rad joint stops"
            )


@dataclass
class ControlInput:
    """Four world-frame GRFs plus two tail joint torques."""

    grf: np.ndarray  # (4, 3) N
    tail_torques: np.ndarray  # (2,) N*m

    def __post_init__(self):
        self.grf = np.asarray(self.grf, float).reshape(4, 3)
        self.tail_torques = np.asarray(self.tail_torques, float).reshape(2)

    @classmethod
    def zero(cls) -> "ControlInput":
        return cls(np.zeros((4, 3)), np.zeros(2))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.grf.ravel(), self.tail_torques])

    @classmethod
    def from_vector(cls, u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, float).reshape(NU)
        return cls(u[:12].reshape(4, 3), u[12:14])


# ---------------------------------------------------------------------------
# JAX kernels
# ---------------------------------------------------------------------------


def _rot_x(a):
    c, s = jnp.cos(a), jnp.sin(a)
    return jnp.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = jnp.cos(a), jnp.sin(a)
    return jnp.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = jnp.cos(a), jnp.sin(a)
    return jnp.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_zyx(theta):
    """Body-to-world rotation for ZYX Euler angles (roll, pitch, yaw)."""
    return _rot_z(theta[2]) @ _rot_y(theta[1]) @ _rot_x(theta[0])


def euler_rate_matrix(theta):
    """E(theta) with omega_body = E @ thetadot for ZYX Euler angles."""
    r, p = theta[0], theta[1]
    sr, cr = jnp.sin(r), jnp.cos(r)
    sp, cp = jnp.sin(p), jnp.cos(p)
    return jnp.array(
        [
            [1.0, 0.0, -sp],
            [0.0, cr, sr * cp],
            [0.0, -sr, cr * cp],
        ]
    )


def rotation_zyx_np(theta) -> np.ndarray:
    """NumPy body-to-world rotation for ZYX Euler (roll, pitch, yaw)."""
    r, p, y = theta
    sr, cr = np.sin(r), np.cos(r)
    sp, cp = np.sin(p), np.cos(p)
    sy, cy = np.sin(y), np.cos(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_rate_matrix_np(theta) -> np.ndarray:
    """NumPy E(theta) with omega_body = E @ thetadot."""
    r, p = theta[0], theta[1]
    sr, cr = np.sin(r), np.cos(r)
    sp, cp = np.sin(p), np.cos(p)
    return np.array([[1.0, 0.0, -sp], [0.0, cr, sr * cp], [0.0, -sr, cr * cp]])


def _tail_tip_body(params, phi):
    """Mount-to-tip vector in the body frame (serial roll then pitch)."""
    rod = _rot_x(phi[0]) @ _rot_y(phi[1]) @ jnp.asarray(_TAIL_ROD_DIR)
    return params["r_mount"] + params["l_t"] * rod


def _tail_tip_world(params, q):
    p, theta, phi = q[:3], q[3:6], q[6:8]
    return p + rotation_zyx(theta) @ _tail_tip_body(params, phi)


def _kinetic_energy(params, q, qd):
    theta = q[3:6]
    pd, thetad, phid = qd[:3], qd[3:6], qd[6:8]
    omega_b = euler_rate_matrix(theta) @ thetad
    _, tail_vel = jax.jvp(lambda qq: _tail_tip_world(params, qq), (q,), (qd,))
    return (
        0.5 * params["m_b"] * pd @ pd
        + 0.5 * omega_b @ params["I_b"] @ omega_b
        + 0.5 * params["m_t"] * tail_vel @ tail_vel
        + 0.5 * params["armature"] * phid @ phid
    )


def _potential_energy(params, q):
    tail_z = _tail_tip_world(params, q)[2]
    return (params["m_b"] * q[2] + params["m_t"] * tail_z) * params["g"]


def _mass_matrix_qd(params, q):
    """Mass matrix in generalized-rate coordinates qdot."""
    return jax.hessian(_kinetic_energy, argnums=2)(params, q, jnp.zeros(NQ))


def _vel_map(params, q):
    """S with v = S @ qdot (state velocities from generalized rates)."""
    E = euler_rate_matrix(q[3:6])
    S = jnp.eye(NQ)
    S = S.at[3:6, 3:6].set(E)
    return S


def _mass_matrix_state(params, q):
    """Mass matrix in state-velocity coordinates v = [pdot, omega, phidot]."""
    Mq = _mass_matrix_qd(params, q)
    Sinv = jnp.linalg.inv(_vel_map(params, q))
    return Sinv.T @ Mq @ Sinv


def _generalized_forces(params, q, u, feet):
    """Generalized forces in qdot coordinates from GRFs and tail torques."""
    p, theta = q[:3], q[3:6]
    f = u[:12].reshape(4, 3)
    tau = u[12:14]
    R = rotation_zyx(theta)
    E = euler_rate_matrix(theta)
    total_force = jnp.sum(f, axis=0)
    moment_world = jnp.sum(jnp.cross(feet - p, f), axis=0)
    # omega_world = R @ E @ thetadot, so the Euler-coordinate force is (R E)^T m.
    q_theta = (R @ E).T @ moment_world
    return jnp.concatenate([total_force, q_theta, tau])


def _bias_forces(params, q, qd):
    """Coriolis/centrifugal plus gravity terms (qdot coordinates)."""
    dT_dqd = jax.grad(_kinetic_energy, argnums=2)
    coriolis = jax.jacfwd(dT_dqd, argnums=1)(params, q, qd) @ qd - jax.grad(
        _kinetic_energy, argnums=1
    )(params, q, qd)
    return coriolis + jax.grad(_potential_energy, argnums=1)(params, q)


def _qd_from_state(params, x):
    theta, v = x[3:6], x[8:16]
    thetad = jnp.linalg.solve(euler_rate_matrix(theta), v[3:6])
    return jnp.concatenate([v[:3], thetad, v[6:8]])


def _accel_qd(params, q, qd, u, feet):
    Mq = _mass_matrix_qd(params, q)
    rhs = _generalized_forces(params, q, u, feet) - _bias_forces(params, q, qd)
    return jnp.linalg.solve(Mq, rhs)


def _continuous_dynamics(params, x, u, feet):
    q = x[:8]
    theta = q[3:6]
    qd = _qd_from_state(params, x)
    qdd = _accel_qd(params, q, qd, u, feet)
    E = euler_rate_matrix(theta)
    _, Edot = jax.jvp(euler_rate_matrix, (theta,), (qd[3:6],))
    omegadot = E @ qdd[3:6] + Edot @ qd[3:6]
    return jnp.concatenate([qd, qdd[:3], omegadot, qdd[6:8]])


def _state_accel(params, x, u, feet):
    """vdot in state-velocity coordinates."""
    return _continuous_dynamics(params, x, u, feet)[8:16]


def _discrete_residual(params, xi, xip1, u, feet, t):
    """Backward-Euler defect f_d(x_i, x_{i+1}, u_i, p_l, t_i).

    Position rows: q_{i+1} - q_i - t * qdot(x_{i+1}).
    Velocity rows: M(q_{i+1}) (v_{i+1} - v_i - t * vdot(x_{i+1}, u_i)),
    i.e. momentum change minus impulse, everything evaluated implicitly
    at step i+1.
    """
    q0, v0 = xi[:8], xi[8:16]
    q1, v1 = xip1[:8], xip1[8:16]
    qd1 = _qd_from_state(params, xip1)
    pos_rows = q1 - q0 - t * qd1
    Mv = _mass_matrix_state(params, q1)
    acc = _state_accel(params, xip1, u, feet)
    vel_rows = Mv @ (v1 - v0 - t * acc)
    return jnp.concatenate([pos_rows, vel_rows])


_mass_matrix_state_jit = jax.jit(_mass_matrix_state)
_continuous_dynamics_jit = jax.jit(_continuous_dynamics)
_state_accel_jit = jax.jit(_state_accel)
_discrete_residual_jit = jax.jit(_discrete_residual)
_residual_jac_jit = jax.jit(jax.jacfwd(_discrete_residual, argnums=(1, 2, 3)))

# Batched versions over the NMPC horizon (leading axis = element index).
_residual_batch_jit = jax.jit(
    jax.vmap(_discrete_residual, in_axes=(None, 0, 0, 0, 0, 0))
)
_residual_jac_batch_jit = jax.jit(
    jax.vmap(
        jax.jacfwd(_discrete_residual, argnums=(1, 2, 3)),
        in_axes=(None, 0, 0, 0, 0, 0),
    )
)
_energy_jit = jax.jit(
    lambda params, x: _kinetic_energy(params, x[:8], _qd_from_state(params, x))
    + _potential_energy(params, x[:8])
)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _check_pitch(q_or_theta):
    pitch = float(np.asarray(q_or_theta).ravel()[1])
    if abs(pitch) >= np.pi / 2 - PITCH_SINGULARITY_EPS:
        raise SingularOrientationError(
            f"Euler pitch {pitch:.4f} rad is inside the ZYX singularity band"
        )


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """8x8 symmetric positive-definite mass matrix at generalized position q.

    Expressed in state-velocity coordinates [pdot_b, omega_body, phidot].
    """
    q = np.asarray(q, float).reshape(NQ)
    _check_pitch(q[3:6])
    M = np.asarray(_mass_matrix_state_jit(model.params(), jnp.asarray(q)))
    return 0.5 * (M + M.T)


def continuous_dynamics(
    model: RobotModel,
    x: RobotState | np.ndarray,
    u: ControlInput | np.ndarray,
    foot_positions: np.ndarray,
) -> np.ndarray:
    """State derivative xdot for world-frame GRFs applied at foot_positions."""
    xv = x.as_vector() if isinstance(x, RobotState) else np.asarray(x, float)
    uv = u.as_vector() if isinstance(u, ControlInput) else np.asarray(u, float)
    feet = np.asarray(foot_positions, float).reshape(4, 3)
    _check_pitch(xv[3:6])
    return np.asarray(
        _continuous_dynamics_jit(
            model.params(), jnp.asarray(xv), jnp.asarray(uv), jnp.asarray(feet)
        )
    )


def discrete_residual(
    model: RobotModel,
    x_i: RobotState | np.ndarray,
    x_ip1: RobotState | np.ndarray,
    u_i: ControlInput | np.ndarray,
    foot_positions: np.ndarray,
    t_i: float,
) -> np.ndarray:
    """Backward-Euler defect vector (16,) for one finite element."""
    if t_i <= 0:
        raise ValueError(f"element duration must be positive, got {t_i}")
    xi = x_i.as_vector() if isinstance(x_i, RobotState) else np.asarray(x_i, float)
    xj = (
        x_ip1.as_vector() if isinstance(x_ip1, RobotState) else np.asarray(x_ip1, float)
    )
    uv = u_i.as_vector() if isinstance(u_i, ControlInput) else np.asarray(u_i, float)
    feet = np.asarray(foot_positions, float).reshape(4, 3)
    _check_pitch(xi[3:6])
    _check_pitch(xj[3:6])
    return np.asarray(
        _discrete_residual_jit(
            model.params(),
            jnp.asarray(xi),
            jnp.asarray(xj),
            jnp.asarray(uv),
            jnp.asarray(feet),
            jnp.asarray(float(t_i)),
        )
    )


def dynamics_jacobians(
    model: RobotModel,
    x_i,
    x_ip1,
    u_i,
    foot_positions: np.ndarray,
    t_i: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact Jacobians of the residual w.r.t. (x_i, x_{i+1}, u_i)."""
    if t_i <= 0:
        raise ValueError(f"element duration must be positive, got {t_i}")
    xi = x_i.as_vector() if isinstance(x_i, RobotState) else np.asarray(x_i, float)
    xj = (
        x_ip1.as_vector() if isinstance(x_ip1, RobotState) else np.asarray(x_ip1, float)
    )
    uv = u_i.as_vector() if isinstance(u_i, ControlInput) else np.asarray(u_i, float)
    feet = np.asarray(foot_positions, float).reshape(4, 3)
    _check_pitch(xi[3:6])
    _check_pitch(xj[3:6])
    jx0, jx1, ju = _residual_jac_jit(
        model.params(),
        jnp.asarray(xi),
        jnp.asarray(xj),
        jnp.asarray(uv),
        jnp.asarray(feet),
        jnp.asarray(float(t_i)),
    )
    return np.asarray(jx0), np.asarray(jx1), np.asarray(ju)


def total_energy(model: RobotModel, x: RobotState | np.ndarray) -> float:
    """Kinetic plus gravitational potential energy of the full model."""
    xv = x.as_vector() if isinstance(x, RobotState) else np.asarray(x, float)
    return float(_energy_jit(model.params(), jnp.asarray(xv)))


def tail_tip_position(model: RobotModel, x: RobotState | np.ndarray) -> np.ndarray:
    """World-frame position of the tail point mass."""
    xv = x.as_vector() if isinstance(x, RobotState) else np.asarray(x, float)
    return np.asarray(_tail_tip_world(model.params(), jnp.asarray(xv[:8])))


def com_velocity(model: RobotModel, x: RobotState | np.ndarray) -> np.ndarray:
    """World-frame velocity of the combined center of mass."""
    xv = x.as_vector() if isinstance(x, RobotState) else np.asarray(x, float)
    params = model.params()

    def com_q(q):
        tail = _tail_tip_world(params, q)
        return (params["m_b"] * q[:3] + params["m_t"] * tail) / (
            params["m_b"] + params["m_t"]
        )

    qd = _qd_from_state(params, jnp.asarray(xv))
    _, vel = jax.jvp(com_q, (jnp.asarray(xv[:8]),), (qd,))
    return np.asarray(vel)


def center_of_mass(model: RobotModel, x: RobotState | np.ndarray) -> np.ndarray:
    """World-frame combined center of mass of body and tail."""
    xv = x.as_vector() if isinstance(x, RobotState) else np.asarray(x, float)
    tail = tail_tip_position(model, xv)
    return (model.body_mass * xv[:3] + model.tail_point_mass * tail) / model.total_mass


def residual_batch(model, X0, X1, U, feet, durations):
    """Vectorized residual over a horizon (used by the NMPC)."""
    return np.asarray(
        _residual_batch_jit(
            model.params(),
            jnp.asarray(X0),
            jnp.asarray(X1),
            jnp.asarray(U),
            jnp.asarray(feet),
            jnp.asarray(durations),
        )
    )


def residual_jacobian_batch(model, X0, X1, U, feet, durations):
    """Vectorized residual Jacobians over a horizon (used by the NMPC)."""
    jx0, jx1, ju = _residual_jac_batch_jit(
        model.params(),
        jnp.asarray(X0),
        jnp.asarray(X1),
        jnp.asarray(U),
        jnp.asarray(feet),
        jnp.asarray(durations),
    )
    return np.asarray(jx0), np.asarray(jx1), np.asarray(ju)
