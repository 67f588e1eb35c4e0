"""Closed-loop locomotion: sensing FSM + gait planner + controllers + sim.

The control stack per simulation step:

* per-leg contact FSM (stage transitions, contact events),
* proprioceptive terrain estimator fed by foot positions/contacts,
* gait schedule updated from events (when the planner is enabled),
* stance force distribution: a virtual-model controller mapping desired
  body wrench to stance-foot GRFs by regularized least squares, clamped
  to the friction cone (fast enough to run every step),
* swing/touchdown/reposition foot targets from splines and probing,
* tail torque from the selected mode: rigidly held ("none"),
  proportional feedback, distributed tail NMPC, or centralized NMPC.

The NMPC modes re-solve on a fixed control tick with warm starts; the
distributed mode pins the GRF plan predicted from the schedule and the
current force distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics as dyn
from . import gait
from .errors import SingularOrientationError
from . import nmpc
from . import proprioception as prop
from . import simulator as sim

log = logging.getLogger(__name__)

TAIL_MODES = ("none", "feedback", "nmpc", "centralized")


@dataclass
class ControllerConfig:
    planner_on: bool = True
    tail_mode: str = "none"
    control_dt: float = 0.04  # NMPC re-solve tick
    horizon: int = 12
    stand_height: float = 0.30
    # virtual-model gains
    kp_pos: np.ndarray = field(default_factory=lambda: np.array([150.0, 150.0, 400.0]))
    kd_pos: np.ndarray = field(default_factory=lambda: np.array([40.0, 40.0, 60.0]))
    kp_ori: np.ndarray = field(default_factory=lambda: np.array([60.0, 60.0, 30.0]))
    kd_ori: np.ndarray = field(default_factory=lambda: np.array([8.0, 8.0, 4.0]))
    # tail
    tail_rest: np.ndarray = field(default_factory=lambda: np.array([0.0, -np.pi / 2]))
    tail_hold_kp: float = 8.0
    tail_hold_kd: float = 0.8
    tail_feedback_kp: float = 40.0
    tail_feedback_kd: float = 4.0
    tail_torque_bound: float = 10.0
    nmpc_max_iter: int = 4
    # swing / probing
    probe_speed: float = 1.0  # m/s downward during touchdown probing
    probe_fast_speed: float = 3.0  # m/s once the expected ground is absent
    dive_probe_speed: float = 6.0  # m/s while descending a detected drop
    probe_fast_depth: float = 0.03  # empty descent that triggers fast probing
    drop_crouch: float = 0.12  # stand-height reduction while a leg has missed
    swing_clearance: float = 0.05
    foothold_feedback_gain: float = 0.3  # scale on velocity/centrifugal offsets
    max_position_error: float = 0.15  # reference governor clamp
    velocity_ramp_time: float = 0.5

    def __post_init__(self):
        if self.tail_mode not in TAIL_MODES:
            raise ValueError(f"tail_mode must be one of {TAIL_MODES}")


@dataclass
class RunResult:
    success: bool
    diverged: bool
    max_roll_error: float
    max_pitch_error: float
    distance: float
    duration: float
    events: list
    log: sim.TrajectoryLog
    terrain_estimate: prop.TerrainEstimate
    failure_reason: str = ""
    tail_joint_path: np.ndarray | None = None  # (n, 2) joint-space polyline
    solve_times: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "success": int(self.success),
            "diverged": int(self.diverged),
            "max_roll_error": self.max_roll_error,
            "max_pitch_error": self.max_pitch_error,
            "distance": self.distance,
            "duration": self.duration,
            "failure_reason": self.failure_reason,
        }


ROLL_FAILURE_LIMIT = np.deg2rad(45.0)


def _wrench_distribution(
    model, desired_force, desired_moment, body_position, stance_feet
):
    """Regularized least-squares GRF distribution over stance feet."""
    legs = [i for i, on in enumerate(stance_feet) if on is not None]
    if not legs:
        return {}
    n = len(legs)
    A = np.zeros((6, 3 * n))
    for j, i in enumerate(legs):
        A[0:3, 3 * j : 3 * j + 3] = np.eye(3)
        r = stance_feet[i] - body_position
        A[3:6, 3 * j : 3 * j + 3] = np.array(
            [[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]]
        )
    w = np.concatenate([desired_force, desired_moment])
    # weight the moment rows above the force rows; tiny force regularizer
    W = np.diag([1.0, 1.0, 1.0, 2.0, 2.0, 1.0])
    H = A.T @ W @ A + 1e-4 * np.eye(3 * n)
    f = np.linalg.solve(H, A.T @ W @ w)
    # with few or badly placed feet the moment terms can inflate the net
    # vertical force far beyond the demand, launching the body; rescale
    total_fz = sum(max(f[3 * j + 2], 0.0) for j in range(n))
    fz_budget = 1.5 * max(desired_force[2], 0.3 * model.weight)
    if total_fz > fz_budget:
        f = f * (fz_budget / total_fz)
    out = {}
    fz_max = 2.5 * model.weight
    for j, i in enumerate(legs):
        fi = f[3 * j : 3 * j + 3].copy()
        fi[2] = np.clip(fi[2], 0.0, fz_max)
        out[i] = sim.clamp_to_friction_cone(fi, model.friction_coefficient)
    return out


def _abduction_angle(leg_vec_body):
    """Angle of the leg vector out of the sagittal (xz) plane."""
    norm = np.linalg.norm(leg_vec_body)
    if norm < 1e-9:
        return 0.0
    return abs(np.arcsin(np.clip(leg_vec_body[1] / norm, -1.0, 1.0)))


class LocomotionController:
    """Stateful closed-loop controller driving a SimWorld."""

    def __init__(self, model, cfg: ControllerConfig, terrain_truth=None, t0=0.0):
        self.model = model
        self.cfg = cfg
        self.schedule = gait.GaitSchedule(t_nominal=t0, t_adaptive=t0)
        self.limits = prop.FsmLimits.for_model(model)
        # while descending a drop the legs may stretch well past their
        # nominal envelope before a planted foot is given up
        self.limits_dive = prop.FsmLimits.for_model(
            model, leg_length=1.5 * model.leg_length
        )
        self.estimate = prop.TerrainEstimate(resolution=0.05)
        self.stages = [prop.LegStage(prop.Stage.STANCE, 0.0) for _ in range(4)]
        self.swing_traj: list = [None] * 4
        self.swing_start = [0.0] * 4
        self.probe_z = [0.0] * 4
        self.probe_start = [0.0] * 4
        self.reposition_target = [None] * 4
        self.events: list = []
        self.ground_level = 0.0
        self.ref_position = None
        self.tail_warm = nmpc.WarmstartCache(grid_step=cfg.control_dt)
        self.cen_warm = nmpc.WarmstartCache(grid_step=cfg.control_dt)
        self._tail_torque = np.zeros(2)
        self._grf_plan = None
        self._next_solve = -np.inf
        self._last_reshape = -np.inf
        self._halt = False
        self._confirmed: dict[tuple[int, int], float] = {}
        self._loaded_at = [0.0] * 4
        self.solve_times: list = []

    # -- references -----------------------------------------------------------

    def _reference(self, world, v_cmd, t):
        robot = world.robot
        ramp = min(1.0, t / max(self.cfg.velocity_ramp_time, 1e-9))
        v = np.array([v_cmd[0], v_cmd[1], 0.0]) * ramp
        if self.ref_position is None:
            self.ref_position = robot.body_position.copy()
        if self._halt:
            # descending a drop: stop chasing the velocity command and
            # keep the body over the feet that actually have ground.  As
            # contacts appear on the lower level the centroid (and with
            # it the body) creeps forward over the edge.
            v = np.zeros(3)
            contacts = np.array(
                [
                    world.foot_positions[i]
                    for i in range(4)
                    if world.foot_contact_flags[i]
                ]
            )
            if len(contacts):
                # weight the lower contacts heavier so the body keeps
                # transferring onto the new level instead of balancing
                # forever astride the edge
                zs = contacts[:, 2]
                spread = max(zs.max() - zs.min(), 1e-9)
                wts = 1.0 + 1.0 * (zs.max() - zs) / spread
                centroid = wts @ contacts[:, :2] / wts.sum()
                pull = centroid - self.ref_position[:2]
                n = np.linalg.norm(pull)
                step = min(n, 1.0 * self._dt)
                if n > 1e-9:
                    self.ref_position[:2] += pull / n * step
        self.ref_position = self.ref_position + v * self._dt
        # reference governor: never run away from the actual body.  While
        # halted over a drop the governor is off — there the reference must
        # hold its ground against a body sliding off its support, not
        # follow it.
        if not self._halt:
            err = self.ref_position[:2] - robot.body_position[:2]
            n = np.linalg.norm(err)
            if n > self.cfg.max_position_error:
                self.ref_position[:2] = (
                    robot.body_position[:2] + err / n * self.cfg.max_position_error
                )
        stand = self.cfg.stand_height
        if self._open_miss() or self._halt:
            # a foot found no ground where expected: crouch to extend reach
            stand -= self.cfg.drop_crouch
        self.ref_position[2] = self.ground_level + stand
        return self.ref_position, v

    def _open_miss(self) -> bool:
        return any(
            ov is not None and not ov.contact and np.isinf(ov.end)
            for ov in self.schedule.overrides
        )

    def _update_ground_level(self, world):
        zs = [
            world.foot_positions[i, 2]
            for i in range(4)
            if world.foot_contact_flags[i]
        ]
        if zs:
            target = float(np.mean(zs))
            self.ground_level += 0.05 * (target - self.ground_level)

    # -- terrain lookup --------------------------------------------------------

    def _known_height(self, x, y):
        """Estimated terrain height at (x, y), or None if unexplored."""
        if self.cfg.planner_on:
            ix, iy = self.estimate.grid.cell_index(x, y)
            nx, ny = self.estimate.grid.heights.shape
            if 0 <= ix < nx and 0 <= iy < ny and self.estimate.known_mask[ix, iy]:
                return float(self.estimate.grid.heights[ix, iy])
        return None

    def _terrain_height(self, x, y):
        h = self._known_height(x, y)
        return self.ground_level if h is None else h

    def _confirmed_height(self, x, y):
        """Terrain height confirmed by an actual foot contact, or None.

        Unlike the full estimate this never contains provisional upper
        bounds written by passing swing feet, so it is safe to use as a
        floor that probing feet must not drill through.
        """
        if not self.cfg.planner_on:
            return None
        return self._confirmed.get(self.estimate.cell_of(x, y))

    # -- per-leg behaviors -----------------------------------------------------

    def _start_swing(self, leg, world, v_ref, t):
        base = self._leg_bases[leg]
        duration = self.schedule.swing_duration
        try:
            vel_err_clamped = np.clip(
                v_ref - np.append(world.robot.body_linear_velocity[:2], 0.0),
                -0.5,
                0.5,
            )
            # feed the tracking error in with the sign that moves the next
            # foothold toward the excess-velocity direction (catching the
            # body), not away from it
            p_vel, p_cf = gait.foothold_offsets(
                max(base[2] - self._terrain_height(base[0], base[1]), 0.05),
                v_ref + vel_err_clamped,
                v_ref,
                np.zeros(3),
            )
            # full-strength offsets pump the trot; soften and clamp them
            p_vel = self.cfg.foothold_feedback_gain * np.clip(p_vel, -0.2, 0.2)
            p_cf = self.cfg.foothold_feedback_gain * np.clip(p_cf, -0.2, 0.2)
        except ValueError:
            p_vel = p_cf = np.zeros(3)
        # nominal touchdown slightly ahead of where the leg base will be,
        # so the foot trails it symmetrically over the stance
        center = base + v_ref * duration
        center[:2] += v_ref[:2] * 0.25 * self.schedule.stance_duration
        target = gait.plan_foothold(
            "stance",
            leg_base_position=base,
            leg_length=self.model.leg_length * 1.3,
            p_center=center,
            p_vel=p_vel,
            p_centrifugal=p_cf,
        )
        target[2] = self._terrain_height(target[0], target[1])
        lift = world.foot_positions[leg].copy()
        apex = gait.apex_height(
            base[2], target[2], lift[2], target[2], self.cfg.swing_clearance
        )
        self.swing_traj[leg] = gait.swing_spline(lift, target, apex, duration)
        self.swing_start[leg] = t

    def _start_reposition(self, leg, world, v_ref):
        # re-aim toward where the body is actually going (during a drop
        # that is mostly downward), falling back to the commanded velocity
        vel = world.robot.body_linear_velocity
        if np.linalg.norm(vel) < 0.1:
            vel = v_ref if np.linalg.norm(v_ref[:2]) > 1e-6 else np.array([1.0, 0, 0])
        self.reposition_target[leg] = gait.plan_foothold(
            "reposition",
            leg_base_position=self._leg_bases[leg],
            leg_length=self.model.leg_length,
            velocity=vel,
            rotation_limit=self.model.abduction_limit,
            stand_height=0.85 * self.model.leg_length,
        )

    # -- tail ------------------------------------------------------------------

    def _tail_hold(self, robot):
        cfg = self.cfg
        err = robot.tail_joint_positions - cfg.tail_rest
        tau = -cfg.tail_hold_kp * err - cfg.tail_hold_kd * robot.tail_joint_velocities
        return np.clip(tau, -cfg.tail_torque_bound, cfg.tail_torque_bound)

    def _nmpc_references(self, world, v_ref, t):
        cfg = self.cfg
        N = cfg.horizon
        durations = np.full(N, cfg.control_dt)
        flags = self.schedule.contact_flags(t, N, cfg.control_dt)
        x0 = world.robot.as_vector()
        x_ref = np.tile(x0, (N + 1, 1))
        for k in range(N + 1):
            x_ref[k, 0:2] = world.robot.body_position[:2] + v_ref[:2] * (
                k * cfg.control_dt
            )
            x_ref[k, 2] = self.ground_level + cfg.stand_height
            x_ref[k, 3:6] = 0.0
            x_ref[k, 6:8] = cfg.tail_rest
            x_ref[k, 8:11] = v_ref
            x_ref[k, 11:16] = 0.0
        feet = np.tile(world.foot_positions, (N, 1, 1))
        return durations, flags, feet, x_ref

    def _grf_horizon_plan(self, flags, grfs):
        """Pin plan for the tail NMPC: the current distribution wherever a
        leg is scheduled in contact, zero elsewhere."""
        N = len(flags)
        plan = np.zeros((N, 12))
        for k in range(N):
            for leg in range(4):
                if flags[k, leg] and grfs.get(leg) is not None:
                    plan[k, 3 * leg : 3 * leg + 3] = grfs[leg]
        return plan

    def _tail_torque_update(self, world, v_ref, t, grfs):
        cfg = self.cfg
        robot = world.robot
        if cfg.tail_mode == "none":
            return self._tail_hold(robot), None
        if cfg.tail_mode == "feedback":
            tau = nmpc.feedback_tail_step(
                robot.as_vector(),
                kp=cfg.tail_feedback_kp,
                kd=cfg.tail_feedback_kd,
                torque_bound=cfg.tail_torque_bound,
            )
            # gentle centering so the tail does not drift into its stops
            tau = tau + 0.25 * self._tail_hold(robot)
            return np.clip(tau, -cfg.tail_torque_bound, cfg.tail_torque_bound), None
        # NMPC modes re-solve on the control tick, hold in between
        if t < self._next_solve:
            return self._tail_torque, None
        self._next_solve = t + cfg.control_dt
        durations, flags, feet, x_ref = self._nmpc_references(world, v_ref, t)
        x0 = robot.as_vector()
        try:
            if cfg.tail_mode == "nmpc":
                plan = self._grf_horizon_plan(flags, grfs)
                sol = nmpc.tail_nmpc_step(
                    self.model, x0, durations, flags, feet, x_ref, plan,
                    warm=self.tail_warm, max_iterations=cfg.nmpc_max_iter,
                    tail_torque_bound=cfg.tail_torque_bound,
                )
                self.solve_times.append(sol.solve_time)
                # iteration-limited solves may return slightly infeasible
                # iterates; the motors saturate at the bound regardless
                self._tail_torque = np.clip(
                    sol.us[0, 12:14],
                    -cfg.tail_torque_bound,
                    cfg.tail_torque_bound,
                )
                return self._tail_torque, None
            sol = nmpc.centralized_nmpc_step(
                self.model, x0, durations, flags, feet, x_ref,
                warm=self.cen_warm, max_iterations=cfg.nmpc_max_iter,
                tail_torque_bound=cfg.tail_torque_bound,
            )
            self.solve_times.append(sol.solve_time)
            self._tail_torque = np.clip(
                sol.us[0, 12:14], -cfg.tail_torque_bound, cfg.tail_torque_bound
            )
            grf_cmd = {
                leg: sol.us[0, 3 * leg : 3 * leg + 3]
                for leg in range(4)
                if flags[0, leg]
            }
            return self._tail_torque, grf_cmd
        except SingularOrientationError:
            self._tail_torque = self._tail_hold(robot)
            return self._tail_torque, None

    def _apply_override_only(self, ev: prop.ContactEvent) -> None:
        """Set the per-leg contact override without touching the clock."""
        sd = self.schedule
        if ev.kind is not prop.EventKind.LANDING:
            return
        phase = sd.leg_phase(ev.time, ev.leg_index)
        if min(phase, 1.0 - phase) <= 0.1:
            # a footfall at its nominal time needs no override; pinning
            # every stance window to its own landing instant slowly
            # desynchronizes the diagonal pairs
            return
        ov = gait.LegOverride(True, ev.time, ev.time + sd.stance_duration)
        overrides = list(sd.overrides)
        overrides[ev.leg_index] = ov
        self.schedule = replace(sd, overrides=tuple(overrides))

    def _event_reshapes_schedule(self, ev: prop.ContactEvent) -> bool:
        """Routine footfalls near their nominal time keep the nominal
        clock; only off-schedule landings (or ones closing a pending
        miss) re-anchor it.  Clock re-anchors are rate-limited so two
        legs disagreeing about the phase cannot fight over it."""
        if ev.kind is prop.EventKind.MISS_CONTACT:
            return True  # only opens an override; never moves the clock
        if ev.kind is prop.EventKind.LANDING:
            ov = self.schedule.overrides[ev.leg_index]
            if ov is not None and not ov.contact and np.isinf(ov.end):
                # closing a pending miss must never be dropped, or the
                # schedule waits forever for a landing that already came
                self._last_reshape = ev.time
                return True
        if ev.time - self._last_reshape < 0.12:
            return False
        if ev.kind is prop.EventKind.LANDING:
            phase = self.schedule.leg_phase(ev.time, ev.leg_index)
            if min(phase, 1.0 - phase) <= 0.1:
                return False
        self._last_reshape = ev.time
        return True

    # -- main tick -------------------------------------------------------------

    def command(self, world: sim.WorldState, v_cmd, dt: float) -> sim.StepCommand:
        self._dt = dt
        t = world.sim_time
        robot = world.robot
        cfg = self.cfg
        R = dyn.rotation_zyx_np(robot.body_orientation)
        self._leg_bases = robot.body_position + (R @ self.model.leg_base_offsets.T).T

        self._update_ground_level(world)
        p_ref, v_ref = self._reference(world, v_cmd, t)

        # terrain estimation (always running; planner decides whether to use it)
        prop.terrain_update(
            self.estimate, world.foot_contact_flags, world.foot_positions
        )
        for leg in range(4):
            if world.foot_contact_flags[leg]:
                x, y, z = world.foot_positions[leg]
                cell = self.estimate.cell_of(x, y)
                # keep the highest supporting height per column: contacts
                # made while penetrated must not drag the record down
                prev = self._confirmed.get(cell, -np.inf)
                self._confirmed[cell] = max(prev, float(z))

        # a drop is detected while some probe has descended past where the
        # ground was expected without finding it, or a missed leg is still
        # awaiting ground
        def expected_ground(leg):
            h = self._confirmed_height(
                world.foot_positions[leg, 0], world.foot_positions[leg, 1]
            )
            return self.ground_level if h is None else h

        def probe_past_expected(leg):
            return (
                self.probe_z[leg]
                < expected_ground(leg) - cfg.probe_fast_depth
                and world.contact_forces[leg, 2] < self.limits.force_threshold
            )

        drop_detected = cfg.planner_on and (
            any(
                s.stage is prop.Stage.TOUCHDOWN and probe_past_expected(leg)
                for leg, s in enumerate(self.stages)
            )
            or any(
                ov is not None and not ov.contact and np.isinf(ov.end)
                for ov in self.schedule.overrides
            )
        )
        # while straddling a step (contact feet far apart in height) the
        # trot must not lift the planted feet; the body crawls down and
        # legs leave stance one at a time via their kinematic limit
        contact_z = [
            world.foot_positions[i, 2]
            for i in range(4)
            if self.stages[i].stage is prop.Stage.STANCE
        ]
        straddling = (
            cfg.planner_on
            and len(contact_z) >= 2
            and max(contact_z) - min(contact_z) > 0.15
        )
        # during a drop (or while a foot is re-aiming after a miss) keep
        # current stance legs planted instead of trotting on
        hold_stance = (
            drop_detected
            or straddling
            or (
                cfg.planner_on
                and any(s.stage is prop.Stage.REPOSITION for s in self.stages)
            )
        )
        self._halt = drop_detected or straddling

        # per-leg FSM
        new_stages = []
        force_touchdown: set[int] = set()
        for leg in range(4):
            leg_vec_world = world.foot_positions[leg] - self._leg_bases[leg]
            leg_vec_body = R.T @ leg_vec_world
            clock_phase = self.schedule.leg_phase(t, leg)
            ov = self.schedule.overrides[leg]
            if ov is not None and ov.start <= t < ov.end:
                # the override, not the blended clock, is this leg's truth:
                # feed the FSM a phase in the middle of the forced window
                clock_phase = 0.25 if ov.contact else 0.75
            if hold_stance and self.stages[leg].stage is prop.Stage.STANCE:
                clock_phase = 0.25
            inputs = prop.FsmInputs(
                clock_phase=clock_phase,
                leg_extension=float(np.linalg.norm(leg_vec_world)),
                abduction_angle=_abduction_angle(leg_vec_body),
                contact_force_z=float(world.contact_forces[leg, 2]),
                time=t,
            )
            limits = (
                self.limits_dive
                if (drop_detected or straddling)
                else self.limits
            )
            stage, event = prop.fsm_update(self.stages[leg], inputs, limits)
            if (
                event is not None
                and event.kind is prop.EventKind.EARLY_LIFT
                and (drop_detected or straddling)
            ):
                # anchors are never given up by the kinematic-limit rule
                # during a descent: the measured force is too noisy there
                # to tell a stretched loaded anchor from a dangling foot,
                # and persistently unloaded anchors are freed one at a
                # time by the straddle-release rule instead
                stage, event = self.stages[leg], None
            if event is not None:
                event = prop.ContactEvent(event.kind, leg, event.time)
                self.events.append(event)
                if cfg.planner_on:
                    if self._event_reshapes_schedule(event):
                        self.schedule = gait.handle_event(self.schedule, event)
                    else:
                        # the clock keeps its anchor, but the leg's own
                        # contact window must still match its new stage or
                        # the clock cycles it right back out
                        self._apply_override_only(event)
                if cfg.planner_on and event.kind is prop.EventKind.MISS_CONTACT:
                    # ground found missing on one side: bring the paired leg
                    # down at once so the drop is caught symmetrically
                    force_touchdown.add(leg ^ 1)
            new_stages.append(stage)
        if drop_detected or straddling:
            # swing arcs are suppressed during a descent: a freed foot is
            # re-aimed toward the travel direction and then probes downward.
            # A foot whose probe already passed the expected surface is the
            # one leading the dive; it keeps probing instead of re-aiming,
            # or it would give up the catch it is about to make.
            force_touchdown.clear()
            for leg in range(4):
                stg = new_stages[leg].stage
                if stg is prop.Stage.SWING:
                    new_stages[leg] = prop.LegStage(prop.Stage.REPOSITION, t)
                elif stg is prop.Stage.REPOSITION and probe_past_expected(leg):
                    new_stages[leg] = prop.LegStage(prop.Stage.TOUCHDOWN, t)
        for leg in range(4):
            if world.contact_forces[leg, 2] >= self.limits.force_threshold:
                self._loaded_at[leg] = t
        if straddling and all(
            s.stage is prop.Stage.STANCE for s in new_stages
        ):
            # all feet planted astride the step but some carry nothing:
            # free the longest-unloaded one (a single leg at a time) so
            # the straddle resolves instead of pitching the body over the
            # still-anchored high feet
            loaded = sum(
                world.contact_forces[i, 2] >= self.limits.force_threshold
                for i in range(4)
            )
            stale = [i for i in range(4) if t - self._loaded_at[i] > 0.15]
            if loaded >= 2 and stale:
                freed = max(stale, key=lambda i: t - self._loaded_at[i])
                new_stages[freed] = prop.LegStage(prop.Stage.REPOSITION, t)
        for leg in force_touchdown:
            leg_ext = float(
                np.linalg.norm(world.foot_positions[leg] - self._leg_bases[leg])
            )
            if (
                new_stages[leg].stage is prop.Stage.SWING
                and leg_ext
                < self.limits.extension_ratio * self.limits.leg_length
            ):
                new_stages[leg] = prop.LegStage(prop.Stage.TOUCHDOWN, t)

        # stage entry actions
        for leg in range(4):
            old, new = self.stages[leg].stage, new_stages[leg].stage
            if new is not old:
                if new is prop.Stage.SWING:
                    self._start_swing(leg, world, v_ref, t)
                elif new is prop.Stage.TOUCHDOWN:
                    self.probe_z[leg] = world.foot_positions[leg, 2]
                    self.probe_start[leg] = self.probe_z[leg]
                elif new is prop.Stage.REPOSITION:
                    self._start_reposition(leg, world, v_ref)
        self.stages = new_stages

        # stance force distribution
        stance_feet = [
            world.foot_positions[leg]
            if self.stages[leg].stage is prop.Stage.STANCE
            else None
            for leg in range(4)
        ]
        pos_err = np.clip(
            p_ref - robot.body_position,
            -cfg.max_position_error,
            cfg.max_position_error,
        )
        total_mass = self.model.body_mass + self.model.tail_point_mass
        omega_world = R @ robot.body_angular_velocity
        desired_force = (
            cfg.kp_pos * pos_err
            + cfg.kd_pos * (v_ref - robot.body_linear_velocity)
            + np.array([0.0, 0.0, total_mass * self.model.gravity])
        )
        desired_moment = np.clip(
            -cfg.kp_ori * robot.body_orientation - cfg.kd_ori * omega_world,
            -25.0,
            25.0,
        )
        grfs = _wrench_distribution(
            self.model, desired_force, desired_moment,
            robot.body_position, stance_feet,
        )
        if self._halt and grfs:
            # while holding position over a step the net fore/aft friction
            # must track the position controller's demand: left alone, the
            # distribution trades pitch moment for fore/aft shove and walks
            # the body off its support in a runaway loop
            pos = sum(max(f[0], 0.0) for f in grfs.values())
            neg = sum(min(f[0], 0.0) for f in grfs.values())
            target_fx = float(desired_force[0])
            if pos + neg > target_fx and pos > 1e-9:
                scale = (max(target_fx, neg) - neg) / pos
                for leg in grfs:
                    if grfs[leg][0] > 0.0:
                        grfs[leg] = grfs[leg] * np.array([scale, 1.0, 1.0])
            elif pos + neg < target_fx and neg < -1e-9:
                scale = (min(target_fx, pos) - pos) / neg
                for leg in grfs:
                    if grfs[leg][0] < 0.0:
                        grfs[leg] = grfs[leg] * np.array([scale, 1.0, 1.0])

        tail_tau, grf_override = self._tail_torque_update(world, v_ref, t, grfs)
        if grf_override is not None:
            for leg, f in grf_override.items():
                if self.stages[leg].stage is prop.Stage.STANCE:
                    grfs[leg] = sim.clamp_to_friction_cone(
                        f, self.model.friction_coefficient
                    )

        # leg commands
        legs = []
        for leg in range(4):
            stage = self.stages[leg].stage
            if stage is prop.Stage.STANCE:
                legs.append(
                    sim.LegCommand(
                        mode=sim.LegMode.STANCE, grf=grfs.get(leg, np.zeros(3))
                    )
                )
            elif stage is prop.Stage.SWING:
                traj = self.swing_traj[leg]
                if traj is None:
                    self._start_swing(leg, world, v_ref, t)
                    traj = self.swing_traj[leg]
                tau_s = t - self.swing_start[leg]
                legs.append(
                    sim.LegCommand(
                        mode=sim.LegMode.SWING,
                        foot_target=traj.position(tau_s),
                        foot_velocity=traj.velocity(tau_s),
                    )
                )
            elif stage is prop.Stage.TOUCHDOWN:
                # probe gently near the expected surface; once clearly past
                # it (a drop-off), extend fast to catch the fall
                if world.contact_forces[leg, 2] < self.limits.force_threshold:
                    # drop quickly while clearly above the expected surface,
                    # then approach the last centimetre gently so the first
                    # contact tick cannot spike the contact spring
                    speed = cfg.probe_speed
                    if self.probe_z[leg] > expected_ground(leg) + 0.01:
                        speed = cfg.probe_fast_speed
                    if (
                        drop_detected or straddling
                    ) and probe_past_expected(leg):
                        speed = cfg.dive_probe_speed
                    self.probe_z[leg] -= speed * dt
                    if (
                        drop_detected or straddling
                    ) and probe_past_expected(leg):
                        # this foot itself found no ground where expected:
                        # hold it at full reach below the leg base so it
                        # leads the falling body into the ground.  Feet that
                        # have not probed past their expected surface keep
                        # the rate-limited descent (they may still be over
                        # the high side of a drop-off).  Where the terrain
                        # estimate already knows the surface, never jump
                        # the foot through it.
                        pin = self._leg_bases[leg, 2] - self.model.leg_length
                        self.probe_z[leg] = min(self.probe_z[leg], pin)
                    confirmed = self._confirmed_height(
                        world.foot_positions[leg, 0],
                        world.foot_positions[leg, 1],
                    )
                    if confirmed is not None:
                        # never drill past a surface a foot has stood on;
                        # half a millimetre of overlap is plenty for the
                        # contact spring to confirm the landing
                        self.probe_z[leg] = max(
                            self.probe_z[leg], confirmed - 5e-4
                        )
                else:
                    # ground found: back the foot out of any overshoot so
                    # the contact spring cannot fling the body
                    self.probe_z[leg] = world.foot_positions[leg, 2] + 0.002
                target = world.foot_positions[leg].copy()
                # recenter under the base while probing, rate-limited so a
                # terrain step the foot cannot feel is approached gently
                xy_err = self._leg_bases[leg, :2] - target[:2]
                xy_step = min(np.linalg.norm(xy_err), cfg.probe_speed * dt)
                if xy_step > 1e-12:
                    cand = target[:2] + xy_err / np.linalg.norm(xy_err) * xy_step
                    # never recenter a deep probe sideways into a wall the
                    # terrain estimate already knows about
                    if (
                        self._terrain_height(cand[0], cand[1])
                        <= self.probe_z[leg] + 0.02
                    ):
                        target[:2] = cand
                target[2] = self.probe_z[leg]
                # zero velocity: advertising the probe speed to the contact
                # model would excite its damper on first touch
                legs.append(
                    sim.LegCommand(
                        mode=sim.LegMode.SWING,
                        foot_target=target,
                        foot_velocity=np.zeros(3),
                    )
                )
            else:  # REPOSITION: glide toward the rotated pose
                target = self.reposition_target[leg]
                if target is None:
                    self._start_reposition(leg, world, v_ref)
                    target = self.reposition_target[leg]
                cur = world.foot_positions[leg]
                step_len = 2.0 * dt  # 2 m/s repositioning speed
                delta = target - cur
                n = np.linalg.norm(delta)
                move = delta if n < step_len else delta / n * step_len
                nxt = cur + move
                # glide over surfaces the terrain estimate already knows
                # instead of raking the foot through them; the probing
                # stage afterwards handles the actual descent
                floor = self._known_height(nxt[0], nxt[1])
                if floor is not None:
                    nxt[2] = max(nxt[2], floor + 0.02)
                legs.append(
                    sim.LegCommand(
                        mode=sim.LegMode.SWING,
                        foot_target=nxt,
                        foot_velocity=np.zeros(3),
                    )
                )
        return sim.StepCommand(legs=legs, tail_torques=tail_tau)


def run_scenario(
    model: dyn.RobotModel,
    scenario: sim.Scenario,
    cfg: ControllerConfig,
    sim_dt: float = 2e-3,
    log_every: int = 10,
    phase_offset: float = 0.0,
) -> RunResult:
    """Run one closed-loop trial and score it.

    A trial fails when the roll error exceeds 45 degrees or the
    simulation diverges.  ``phase_offset`` shifts the gait clock start
    (used by batch experiments to randomize initial conditions).
    """
    world = sim.SimWorld(model, scenario.terrain, scenario.initial_state)
    ctrl = LocomotionController(
        model, cfg, t0=-phase_offset * gait.GaitSchedule().nominal_period
    )
    ctrl.ground_level = scenario.terrain.height_at(
        scenario.initial_state.body_position[0],
        scenario.initial_state.body_position[1],
    )
    traj = sim.TrajectoryLog()
    start_xy = scenario.initial_state.body_position[:2].copy()
    max_roll = 0.0
    max_pitch = 0.0
    tail_path = []
    diverged = False
    reason = ""
    n_steps = int(round(scenario.duration / sim_dt))
    try:
        for k in range(n_steps):
            cmd = ctrl.command(world.state, scenario.commanded_velocity, sim_dt)
            world.step(cmd, sim_dt)
            robot = world.state.robot
            max_roll = max(max_roll, abs(robot.body_orientation[0]))
            max_pitch = max(max_pitch, abs(robot.body_orientation[1]))
            tail_path.append(robot.tail_joint_positions.copy())
            if max_roll >= ROLL_FAILURE_LIMIT:
                break  # already a failed trial; no need to simulate the crash
            if k % log_every == 0:
                u = np.concatenate(
                    [world.state.contact_forces.ravel(), cmd.tail_torques]
                )
                traj.append(world.state, u)
    except sim.SimulationDivergedError as exc:
        diverged = True
        reason = str(exc)
    success = (not diverged) and max_roll < ROLL_FAILURE_LIMIT
    if not success and not reason:
        reason = "roll error exceeded 45 degrees"
    end_xy = world.state.robot.body_position[:2]
    return RunResult(
        success=success,
        diverged=diverged,
        max_roll_error=max_roll,
        max_pitch_error=max_pitch,
        distance=float(np.linalg.norm(end_xy - start_xy)),
        duration=world.state.sim_time,
        events=ctrl.events,
        log=traj,
        terrain_estimate=ctrl.estimate,
        failure_reason=reason,
        tail_joint_path=np.array(tail_path) if tail_path else None,
        solve_times=ctrl.solve_times,
    )
