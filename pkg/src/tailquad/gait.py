"""Event-adaptive gait scheduling, foothold selection, and swing splines.

The gait clock is a trot with a fixed nominal period.  Contact events
reported by the per-leg sensing FSM re-anchor an adaptive clock so the
event lands exactly on a stage boundary; the planner phase is a weighted
average of the nominal and adaptive clocks whose weight decays linearly
over a fixed recovery window, so the gait converges back to the nominal
timing.  Footholds combine a minimum-enclosing-circle stance center with
velocity-tracking and centrifugal offsets, projected to the estimated
terrain.  Swing trajectories are cubic Hermite splines through liftoff,
apex, and touchdown.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial.transform import Rotation

from .proprioception import ContactEvent, EventKind

log = logging.getLogger(__name__)

# trot: diagonal pairs (FL, RR) and (FR, RL) alternate
LEG_PHASE_OFFSETS = (0.0, 0.5, 0.5, 0.0)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LegOverride:
    """Forced contact value for one leg over [start, end)."""

    contact: bool
    start: float
    end: float  # inf = open-ended (lost stance awaiting landing)


@dataclass(frozen=True)
class GaitSchedule:
    """Blended nominal/adaptive gait clock plus per-leg contact overrides."""

    nominal_period: float = 0.48
    duty_factor: float = 0.5
    leg_offsets: tuple = LEG_PHASE_OFFSETS
    t_nominal: float = 0.0
    t_adaptive: float = 0.0
    t_event: float = -np.inf
    event_period: float = 0.96  # 2 * nominal_period: linear recovery window
    overrides: tuple = (None, None, None, None)

    def __post_init__(self):
        if self.nominal_period <= 0:
            raise ValueError("nominal_period must be positive")
        if not 0 < self.duty_factor < 1:
            raise ValueError("duty_factor must be in (0, 1)")
        if self.event_period <= 0:
            raise ValueError("event_period must be positive")

    @property
    def stance_duration(self) -> float:
        return self.duty_factor * self.nominal_period

    @property
    def swing_duration(self) -> float:
        return (1.0 - self.duty_factor) * self.nominal_period

    def blend_weight(self, t: float) -> float:
        return max(1.0 - (t - self.t_event) / self.event_period, 0.0)

    def leg_phase(self, t: float, leg: int) -> float:
        return (blend_phase(t, self) - self.leg_offsets[leg]) % 1.0

    def contact_at(self, t: float, leg: int) -> bool:
        ov = self.overrides[leg]
        if ov is not None and ov.start <= t < ov.end:
            return ov.contact
        return self.leg_phase(t, leg) < self.duty_factor

    def contact_flags(self, t_start: float, n_elements: int, dt: float) -> np.ndarray:
        """Per-leg contact booleans over a horizon, sampled mid-element."""
        flags = np.zeros((n_elements, 4), dtype=bool)
        for k in range(n_elements):
            t = t_start + (k + 0.5) * dt
            for leg in range(4):
                flags[k, leg] = self.contact_at(t, leg)
        return flags


def blend_phase(t: float, sched: GaitSchedule) -> float:
    """Gait phase in [0, 1): weighted average of nominal and adaptive clocks.

    The weight decays linearly from 1 at the event to 0 after the
    recovery window.  The average is taken on the unwrapped clocks and
    wrapped once at the end, so the phase is continuous on the circle
    for all t (including the end of the window).
    """
    T = sched.nominal_period
    w = sched.blend_weight(t)
    unwrapped = ((1.0 - w) * (t - sched.t_nominal) + w * (t - sched.t_adaptive)) / T
    return unwrapped % 1.0


def handle_event(sched: GaitSchedule, ev: ContactEvent) -> GaitSchedule:
    """Fold one contact event into the schedule.

    MissContact voids the rest of the current stance (open-ended
    non-contact until the landing arrives).  Landing inserts a full
    stance stage and re-anchors the adaptive clock so the leg's phase is
    exactly 0 at the landing instant.  EarlyLift inserts a full swing
    stage and re-anchors so the leg's phase is exactly the duty factor.
    Events for a leg already in the claimed state are ignored with a log.
    """
    t, leg = ev.time, ev.leg_index
    T = sched.nominal_period
    offset = sched.leg_offsets[leg]
    cur = sched.overrides[leg]

    if ev.kind is EventKind.MISS_CONTACT:
        if cur is not None and not cur.contact and np.isinf(cur.end):
            log.info("miss-contact for leg %d already pending; ignored", leg)
            return sched
        new_ov = LegOverride(False, t, np.inf)
        return _with_override(sched, leg, new_ov)

    if ev.kind is EventKind.LANDING:
        if cur is not None and cur.contact and cur.start <= t < cur.end:
            log.info("landing for leg %d already in stance override; ignored", leg)
            return sched
        new_ov = LegOverride(True, t, t + sched.stance_duration)
        t_adaptive = t - T * (offset % 1.0)
        return replace(
            _with_override(sched, leg, new_ov),
            t_adaptive=t_adaptive,
            t_event=t,
        )

    # EarlyLift
    if cur is not None and not cur.contact and cur.start <= t < cur.end:
        log.info("early-lift for leg %d already in swing override; ignored", leg)
        return sched
    new_ov = LegOverride(False, t, t + sched.swing_duration)
    t_adaptive = t - T * ((offset + sched.duty_factor) % 1.0)
    return replace(
        _with_override(sched, leg, new_ov),
        t_adaptive=t_adaptive,
        t_event=t,
    )


def _with_override(sched: GaitSchedule, leg: int, ov: LegOverride) -> GaitSchedule:
    overrides = list(sched.overrides)
    overrides[leg] = ov
    return replace(sched, overrides=tuple(overrides))


# ---------------------------------------------------------------------------
# stance center: minimum enclosing circle in the xy-plane
# ---------------------------------------------------------------------------


def _circle_two(a, b):
    c = (a + b) / 2.0
    return c, float(np.linalg.norm(a - c))


def _circle_three(a, b, c):
    # circumcircle; degenerate (collinear) inputs fall back to the widest pair
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        pairs = [_circle_two(a, b), _circle_two(b, c), _circle_two(a, c)]
        return max(pairs, key=lambda cr: cr[1])
    ux = (
        (ax**2 + ay**2) * (by - cy)
        + (bx**2 + by**2) * (cy - ay)
        + (cx**2 + cy**2) * (ay - by)
    ) / d
    uy = (
        (ax**2 + ay**2) * (cx - bx)
        + (bx**2 + by**2) * (ax - cx)
        + (cx**2 + cy**2) * (bx - ax)
    ) / d
    center = np.array([ux, uy])
    return center, float(np.linalg.norm(a - center))


def _in_circle(p, center, radius):
    return np.linalg.norm(p - center) <= radius + 1e-10


def minimum_enclosing_circle(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Smallest circle containing all 2-d points (Welzl's algorithm)."""
    pts = [np.asarray(p, float) for p in points]
    rng = random.Random(0)
    rng.shuffle(pts)
    center, radius = pts[0].copy(), 0.0
    for i, p in enumerate(pts):
        if _in_circle(p, center, radius):
            continue
        center, radius = p.copy(), 0.0
        for j in range(i):
            q = pts[j]
            if _in_circle(q, center, radius):
                continue
            center, radius = _circle_two(p, q)
            for k in range(j):
                r = pts[k]
                if _in_circle(r, center, radius):
                    continue
                center, radius = _circle_three(p, q, r)
    return center, radius


def stance_center(leg_base_positions: np.ndarray) -> np.ndarray:
    """Point minimizing the maximum distance to the leg-base samples (xy).

    z is the mean sample height; callers project it to terrain.
    """
    pts = np.atleast_2d(np.asarray(leg_base_positions, float))
    if pts.shape[0] == 0:
        raise ValueError("stance_center needs at least one sample")
    center_xy, _ = minimum_enclosing_circle(pts[:, :2])
    z = float(pts[:, 2].mean()) if pts.shape[1] > 2 else 0.0
    return np.array([center_xy[0], center_xy[1], z])


# ---------------------------------------------------------------------------
# foothold targets
# ---------------------------------------------------------------------------


def foothold_offsets(
    p_lb_z_td: float,
    body_vel_td: np.ndarray,
    body_vel_ref_td: np.ndarray,
    omega_ref: np.ndarray,
    g: float = 9.81,
) -> tuple[np.ndarray, np.ndarray]:
    """Velocity-tracking and centrifugal foothold offsets.

    p_vel = sqrt(h/g) * (v_ref - v);  p_centrifugal = (h/g) * (v x w_ref)
    where h is the leg-base height above the touchdown point.
    """
    if p_lb_z_td <= 0:
        raise ValueError("leg-base height above touchdown must be positive")
    v = np.asarray(body_vel_td, float)
    v_ref = np.asarray(body_vel_ref_td, float)
    w_ref = np.asarray(omega_ref, float)
    p_vel = np.sqrt(p_lb_z_td / g) * (v_ref - v)
    p_centrifugal = (p_lb_z_td / g) * np.cross(v, w_ref)
    return p_vel, p_centrifugal


def plan_foothold(
    mode: str,
    *,
    leg_base_position: np.ndarray,
    leg_length: float,
    p_center: np.ndarray | None = None,
    p_vel: np.ndarray | None = None,
    p_centrifugal: np.ndarray | None = None,
    terrain=None,
    velocity: np.ndarray | None = None,
    rotation_limit: float = np.deg2rad(40.5),
    stand_height: float | None = None,
) -> np.ndarray:
    """Target foothold for one leg.

    stance: stance center plus tracking offsets, z projected to the
    terrain estimate.  reposition: the nominal downward leg rotated
    toward the velocity direction by the joint limit.  Unreachable
    targets are clamped to the reach sphere with a warning.
    """
    base = np.asarray(leg_base_position, float)
    if mode == "stance":
        if p_center is None:
            raise ValueError("stance mode requires p_center")
        target = np.asarray(p_center, float).copy()
        if p_vel is not None:
            target = target + np.asarray(p_vel, float)
        if p_centrifugal is not None:
            target = target + np.asarray(p_centrifugal, float)
        if terrain is not None:
            target[2] = terrain.height_at(target[0], target[1])
    elif mode == "reposition":
        h = stand_height if stand_height is not None else 0.85 * leg_length
        down = np.array([0.0, 0.0, -h])
        if velocity is not None and np.linalg.norm(np.asarray(velocity, float)[:2]) > 1e-9:
            v_hat = np.zeros(3)
            v_hat[:2] = np.asarray(velocity, float)[:2]
            v_hat /= np.linalg.norm(v_hat)
            axis = np.cross(np.array([0.0, 0.0, -1.0]), v_hat)
            axis /= np.linalg.norm(axis)
            down = Rotation.from_rotvec(rotation_limit * axis).apply(down)
        target = base + down
    else:
        raise ValueError(f"unknown foothold mode: {mode!r}")

    reach = np.linalg.norm(target - base)
    if reach > leg_length:
        log.warning(
            "foothold %.3f m from leg base exceeds reach %.3f m; clamped",
            reach,
            leg_length,
        )
        target = base + (target - base) * (leg_length / reach)
    return target


# ---------------------------------------------------------------------------
# swing trajectories
# ---------------------------------------------------------------------------


def apex_height(
    predicted_body_z: float,
    terrain_z: float,
    liftoff_z: float,
    touchdown_z: float,
    clearance: float = 0.05,
) -> float:
    """Swing apex height: between predicted body height and terrain,
    plus clearance, never below the higher endpoint."""
    z = 0.5 * (predicted_body_z + terrain_z) + clearance
    return max(z, max(liftoff_z, touchdown_z) + 0.02)


@dataclass(frozen=True)
class SwingTrajectory:
    """C1 cubic Hermite swing path through liftoff, apex, touchdown."""

    splines: tuple  # one CubicHermiteSpline per axis
    duration: float

    def position(self, t: float) -> np.ndarray:
        t = np.clip(t, 0.0, self.duration)
        return np.array([float(s(t)) for s in self.splines])

    def velocity(self, t: float) -> np.ndarray:
        t = np.clip(t, 0.0, self.duration)
        return np.array([float(s.derivative()(t)) for s in self.splines])


def swing_spline(
    liftoff: np.ndarray,
    touchdown: np.ndarray,
    apex_z: float,
    duration: float,
    apex_fraction: float = 0.5,
) -> SwingTrajectory:
    """Swing path interpolating liftoff, an apex waypoint, and touchdown.

    Endpoint velocities are zero; apex velocity carries the average
    horizontal rate with zero vertical rate.
    """
    if duration <= 0:
        raise ValueError("swing duration must be positive")
    if not 0 < apex_fraction < 1:
        raise ValueError("apex_fraction must be in (0, 1)")
    p0 = np.asarray(liftoff, float)
    p2 = np.asarray(touchdown, float)
    t_apex = apex_fraction * duration
    apex = 0.5 * (p0 + p2)
    apex[2] = apex_z
    times = np.array([0.0, t_apex, duration])
    mid_vel = (p2 - p0) / duration
    mid_vel[2] = 0.0
    splines = []
    for axis in range(3):
        ys = np.array([p0[axis], apex[axis], p2[axis]])
        dydx = np.array([0.0, mid_vel[axis], 0.0])
        splines.append(CubicHermiteSpline(times, ys, dydx))
    return SwingTrajectory(splines=tuple(splines), duration=duration)
