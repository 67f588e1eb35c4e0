"""Desk-scale physics sandbox for the tailed quadruped.

Replaces a full robotics simulator with a small deterministic world:

* the body + tail follow the full centroidal dynamics model,
* legs are massless; swing feet track commanded Cartesian trajectories
  kinematically, stance feet are anchored and transmit commanded GRFs
  saturated by a Coulomb friction cone,
* feet without a force command interact with the terrain through a
  penalty (spring-damper) contact model,
* terrain is a heightfield with bilinear interpolation.

Everything is seeded and pure NumPy, so identical scenarios produce
bitwise-identical trajectories.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import dynamics as dyn
from .dynamics import ControlInput, RobotModel, RobotState
from .errors import DataError, SimulationDivergedError, SingularOrientationError


# ---------------------------------------------------------------------------
# heightfield terrain
# ---------------------------------------------------------------------------


@dataclass
class Heightfield:
    """Regular elevation grid. heights[ix, iy] at origin + index*resolution.

    Out-of-bounds queries clamp to the boundary cell.
    """

    origin: np.ndarray  # (2,) m
    resolution: float  # m per cell
    heights: np.ndarray  # (nx, ny) m

    def __post_init__(self):
        self.origin = np.asarray(self.origin, float).reshape(2)
        self.heights = np.asarray(self.heights, float)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.heights.ndim != 2:
            raise ValueError("heights must be a 2-D array")

    @property
    def shape(self):
        return self.heights.shape

    def cell_index(self, x, y):
        """Nearest cell index for a world xy position (boundary-clamped)."""
        ix = int(round((x - self.origin[0]) / self.resolution))
        iy = int(round((y - self.origin[1]) / self.resolution))
        nx, ny = self.heights.shape
        return min(max(ix, 0), nx - 1), min(max(iy, 0), ny - 1)

    def cell_center(self, ix, iy):
        return self.origin + self.resolution * np.array([ix, iy], float)

    def height_at(self, x, y):
        """Bilinearly interpolated height, clamped at the boundary."""
        nx, ny = self.heights.shape
        gx = np.clip((x - self.origin[0]) / self.resolution, 0, nx - 1)
        gy = np.clip((y - self.origin[1]) / self.resolution, 0, ny - 1)
        ix0 = min(int(gx), nx - 2) if nx > 1 else 0
        iy0 = min(int(gy), ny - 2) if ny > 1 else 0
        fx = gx - ix0
        fy = gy - iy0
        h = self.heights
        if nx == 1 and ny == 1:
            return float(h[0, 0])
        if nx == 1:
            return float(h[0, iy0] * (1 - fy) + h[0, iy0 + 1] * fy)
        if ny == 1:
            return float(h[ix0, 0] * (1 - fx) + h[ix0 + 1, 0] * fx)
        return float(
            h[ix0, iy0] * (1 - fx) * (1 - fy)
            + h[ix0 + 1, iy0] * fx * (1 - fy)
            + h[ix0, iy0 + 1] * (1 - fx) * fy
            + h[ix0 + 1, iy0 + 1] * fx * fy
        )

    # -- CSV import/export ---------------------------------------------------

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["origin", self.origin[0], self.origin[1]])
            writer.writerow(["resolution", self.resolution])
            for row in self.heights:
                writer.writerow([f"{v:.9g}" for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Heightfield":
        path = Path(path)
        if not path.exists():
            raise DataError(f"heightfield file not found: {path}")
        with path.open() as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3 or rows[0][0] != "origin" or rows[1][0] != "resolution":
            raise DataError(f"malformed heightfield header in {path}")
        origin = np.array([float(rows[0][1]), float(rows[0][2])])
        resolution = float(rows[1][1])
        heights = np.array([[float(v) for v in row] for row in rows[2:]])
        return cls(origin, resolution, heights)


def make_rough_terrain(
    extent, height_std: float, correlation_length: float, seed: int, resolution=0.05
) -> Heightfield:
    """Smooth Gaussian random field with exactly the requested sample std."""
    extent = np.asarray(extent, float).reshape(2)
    if np.any(extent <= 0) or correlation_length <= 0 or height_std < 0:
        raise ValueError("extent, correlation_length must be positive; std >= 0")
    nx = int(round(extent[0] / resolution)) + 1
    ny = int(round(extent[1] / resolution)) + 1
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((nx, ny))
    smooth = gaussian_filter(noise, sigma=correlation_length / resolution, mode="wrap")
    std = smooth.std()
    if height_std == 0 or std == 0:
        heights = np.zeros((nx, ny))
    else:
        smooth = smooth - smooth.mean()
        heights = smooth * (height_std / std)
    return Heightfield(origin=np.array([0.0, 0.0]), resolution=resolution, heights=heights)


def make_cliff(
    drop_height: float, edge_x: float, extent=(8.0, 4.0), resolution=0.05, origin=(-4.0, -2.0)
) -> Heightfield:
    """Two flat plateaus: z = drop_height for x < edge_x, z = 0 beyond."""
    if drop_height < 0:
        raise ValueError("drop_height must be non-negative")
    extent = np.asarray(extent, float)
    origin = np.asarray(origin, float)
    nx = int(round(extent[0] / resolution)) + 1
    ny = int(round(extent[1] / resolution)) + 1
    xs = origin[0] + resolution * np.arange(nx)
    heights = np.where(xs[:, None] < edge_x, drop_height, 0.0) * np.ones((1, ny))
    return Heightfield(origin=origin, resolution=resolution, heights=heights)


# ---------------------------------------------------------------------------
# world state and commands
# ---------------------------------------------------------------------------


class LegMode(enum.Enum):
    SWING = "swing"  # foot tracks a commanded Cartesian trajectory
    STANCE = "stance"  # foot anchored, commanded GRF transmitted
    ATTACHED = "attached"  # foot rigidly carried by the body (passive legs)


@dataclass
class LegCommand:
    mode: LegMode = LegMode.ATTACHED
    foot_target: np.ndarray | None = None  # world, m (SWING)
    foot_velocity: np.ndarray | None = None  # world, m/s (SWING)
    grf: np.ndarray | None = None  # world, N (STANCE)


@dataclass
class StepCommand:
    legs: list  # 4 x LegCommand
    tail_torques: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class WorldState:
    robot: RobotState
    foot_positions: np.ndarray  # (4, 3) world m
    foot_contact_flags: np.ndarray  # (4,) bool
    contact_forces: np.ndarray  # (4, 3) world N
    sim_time: float = 0.0


@dataclass
class Scenario:
    terrain: Heightfield
    initial_state: RobotState
    commanded_velocity: np.ndarray  # (2,) m/s
    duration: float
    seed: int = 0

    def __post_init__(self):
        self.commanded_velocity = np.asarray(self.commanded_velocity, float).reshape(2)
        if self.duration <= 0:
            raise ValueError("scenario duration must be positive")


@dataclass
class ContactParams:
    stiffness: float = 1e5  # N/m
    damping: float = 1e3  # N*s/m
    tangential_damping: float = 2e3  # N*s/m, clamped by the friction cone
    penetration_tolerance: float = 1e-4  # m


def detect_contacts(
    foot_positions: np.ndarray,
    foot_velocities: np.ndarray,
    terrain: Heightfield,
    params: ContactParams = ContactParams(),
    mu: float = 0.7,
):
    """Penalty contact model: per-foot (flag, force).

    Normal force is spring-damper against vertical penetration (never
    adhesive); tangential force is viscous, clamped to the Coulomb cone.
    """
    foot_positions = np.asarray(foot_positions, float).reshape(4, 3)
    foot_velocities = np.asarray(foot_velocities, float).reshape(4, 3)
    flags = np.zeros(4, dtype=bool)
    forces = np.zeros((4, 3))
    for i in range(4):
        x, y, z = foot_positions[i]
        h = terrain.height_at(x, y)
        penetration = h - z
        if penetration <= 0:
            continue
        flags[i] = True
        vz = foot_velocities[i, 2]
        fn = params.stiffness * penetration - params.damping * vz
        fn = max(fn, 0.0)
        vt = foot_velocities[i, :2]
        ft = -params.tangential_damping * vt
        ft_max = mu * fn
        ft_norm = np.linalg.norm(ft)
        if ft_norm > ft_max and ft_norm > 0:
            ft = ft * (ft_max / ft_norm)
        forces[i] = [ft[0], ft[1], fn]
    return flags, forces


def clamp_to_friction_cone(force: np.ndarray, mu: float) -> np.ndarray:
    """Project a commanded GRF into {f_z >= 0, |f_t| <= mu f_z}."""
    f = np.asarray(force, float).copy()
    f[2] = max(f[2], 0.0)
    ft = np.linalg.norm(f[:2])
    ft_max = mu * f[2]
    if ft > ft_max and ft > 0:
        f[:2] *= ft_max / ft
    return f


class SimWorld:
    """One simulated world instance (single-threaded)."""

    def __init__(
        self,
        model: RobotModel,
        terrain: Heightfield,
        initial_state: RobotState,
        contact_params: ContactParams | None = None,
        dt_max: float = 2e-3,
    ):
        self.model = model
        self.terrain = terrain
        self.contact = contact_params or ContactParams()
        self.dt_max = dt_max
        feet = self._attached_feet(initial_state)
        # Attached feet start on the terrain surface when possible.
        for i in range(4):
            h = terrain.height_at(feet[i, 0], feet[i, 1])
            feet[i, 2] = max(feet[i, 2], h)
        self.state = WorldState(
            robot=initial_state,
            foot_positions=feet,
            foot_contact_flags=np.zeros(4, dtype=bool),
            contact_forces=np.zeros((4, 3)),
        )
        self.foot_velocities = np.zeros((4, 3))
        self._attach_offsets = None

    # -- kinematic helpers ----------------------------------------------------

    def leg_base_positions(self, robot: RobotState | None = None) -> np.ndarray:
        robot = robot or self.state.robot
        R = dyn.rotation_zyx_np(robot.body_orientation)
        return robot.body_position + (R @ self.model.leg_base_offsets.T).T

    def _attached_feet(self, robot: RobotState) -> np.ndarray:
        R = dyn.rotation_zyx_np(robot.body_orientation)
        offsets = self.model.leg_base_offsets + np.array([0.0, 0.0, -0.85 * self.model.leg_length])
        return robot.body_position + (R @ offsets.T).T

    # -- stepping -------------------------------------------------------------

    def step(self, command: StepCommand, dt: float) -> WorldState:
        """Advance the world by dt (semi-implicit Euler)."""
        if not (0 < dt <= self.dt_max):
            raise ValueError(f"dt must be in (0, {self.dt_max}], got {dt}")
        model = self.model
        robot = self.state.robot
        feet = self.state.foot_positions.copy()
        foot_vel = np.zeros((4, 3))

        # 1. update foot kinematics
        for i, leg in enumerate(command.legs):
            if leg.mode is LegMode.SWING:
                feet[i] = np.asarray(leg.foot_target, float)
                if leg.foot_velocity is not None:
                    foot_vel[i] = np.asarray(leg.foot_velocity, float)
            elif leg.mode is LegMode.ATTACHED:
                feet[i] = self._attached_feet(robot)[i]
                # velocity of a body-fixed point
                R = dyn.rotation_zyx_np(robot.body_orientation)
                r = feet[i] - robot.body_position
                omega_w = R @ robot.body_angular_velocity
                foot_vel[i] = robot.body_linear_velocity + np.cross(omega_w, r)
            # STANCE: anchored, zero velocity

        # 2. contact forces
        pen_flags, pen_forces = detect_contacts(
            feet, foot_vel, self.terrain, self.contact, model.friction_coefficient
        )
        applied = np.zeros((4, 3))
        flags = np.zeros(4, dtype=bool)
        for i, leg in enumerate(command.legs):
            h = self.terrain.height_at(feet[i, 0], feet[i, 1])
            touching = feet[i, 2] <= h + self.contact.penetration_tolerance
            if leg.mode is LegMode.STANCE:
                if touching and leg.grf is not None:
                    applied[i] = clamp_to_friction_cone(
                        leg.grf, model.friction_coefficient
                    )
                    flags[i] = True
            else:
                applied[i] = pen_forces[i]
                flags[i] = pen_flags[i]

        # 3. integrate body + tail dynamics
        u = np.concatenate([applied.ravel(), np.asarray(command.tail_torques, float)])
        x = robot.as_vector()
        try:
            xdot = dyn.continuous_dynamics(model, x, u, feet)
        except SingularOrientationError as exc:
            # a tumbling robot hitting the Euler singularity is a diverged
            # trial, not a model-usage bug
            raise SimulationDivergedError(
                f"orientation singularity at t={self.state.sim_time:.4f}: {exc}",
                last_valid_state=self.state,
            ) from exc
        v_new = x[8:16] + dt * xdot[8:16]
        x_new = x.copy()
        x_new[8:16] = v_new
        # position update with the updated velocities (semi-implicit)
        E = dyn.euler_rate_matrix_np(x[3:6])
        qdot = np.concatenate([v_new[:3], np.linalg.solve(E, v_new[3:6]), v_new[6:8]])
        x_new[:8] = x[:8] + dt * qdot

        # tail joint stops at +/- tail_joint_limit (inelastic)
        lim = model.tail_joint_limit
        for j in range(2):
            if x_new[6 + j] > lim:
                x_new[6 + j] = lim
                x_new[14 + j] = min(x_new[14 + j], 0.0)
            elif x_new[6 + j] < -lim:
                x_new[6 + j] = -lim
                x_new[14 + j] = max(x_new[14 + j], 0.0)

        if not np.all(np.isfinite(x_new)):
            raise SimulationDivergedError(
                f"non-finite state at t={self.state.sim_time:.4f}",
                last_valid_state=self.state,
            )

        self.foot_velocities = foot_vel
        self.state = WorldState(
            robot=RobotState.from_vector(x_new),
            foot_positions=feet,
            foot_contact_flags=flags,
            contact_forces=applied,
            sim_time=self.state.sim_time + dt,
        )
        return self.state


# ---------------------------------------------------------------------------
# trajectory logging
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = (
    ["time"]
    + [f"x{i}" for i in range(16)]
    + [f"u{i}" for i in range(14)]
    + [f"contact{i}" for i in range(4)]
    + [f"foot{i}_{ax}" for i in range(4) for ax in "xyz"]
)


class TrajectoryLog:
    """CSV trajectory log: time, state, inputs, contacts, foot positions."""

    def __init__(self):
        self.rows = []

    def append(self, world: WorldState, u: np.ndarray):
        self.rows.append(
            np.concatenate(
                [
                    [world.sim_time],
                    world.robot.as_vector(),
                    np.asarray(u, float).reshape(14),
                    world.foot_contact_flags.astype(float),
                    world.foot_positions.ravel(),
                ]
            )
        )

    def as_array(self) -> np.ndarray:
        return np.array(self.rows) if self.rows else np.zeros((0, len(TRAJECTORY_HEADER)))

    def to_csv(self, path: str | Path):
        arr = self.as_array()
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAJECTORY_HEADER)
            for row in arr:
                writer.writerow([f"{v:.9g}" for v in row])


def load_trajectory_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"trajectory log not found: {path}")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRAJECTORY_HEADER:
        raise DataError(f"malformed trajectory log header in {path}")
    data = []
    for k, row in enumerate(rows[1:], start=2):
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise DataError(f"malformed trajectory log row {k} in {path}") from exc
        if len(row) != len(TRAJECTORY_HEADER):
            raise DataError(f"malformed trajectory log row {k} in {path}")
    if not data:
        raise DataError(f"trajectory log {path} contains no data rows")
    return np.array(data)
