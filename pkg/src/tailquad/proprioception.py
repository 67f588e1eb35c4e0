"""Contact sensing and proprioceptive terrain estimation.

Two pieces:

* a per-leg finite-state machine over {Stance, Swing, Touchdown,
  Reposition} driven by the gait clock, leg extension, and sensed
  contact force.  It emits the discrete contact events (MissContact,
  Landing, EarlyLift) the gait planner reacts to.  Only delayed contact
  is handled; early contact is deliberately out of scope.
* a foothold-history terrain estimator: swing feet that dip below the
  current estimate write provisional upper bounds and are remembered per
  leg; a confirmed touchdown rewrites those pending cells with the
  touchdown height (assumes a simple vertical drop).  Post-processing
  inpaints unknown cells from their neighborhoods and smooths with a
  small mean filter.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DataError
from .simulator import Heightfield

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# contact-sensing finite-state machine
# ---------------------------------------------------------------------------


class Stage(enum.Enum):
    STANCE = "stance"
    SWING = "swing"
    TOUCHDOWN = "touchdown"
    REPOSITION = "reposition"


class EventKind(enum.Enum):
    MISS_CONTACT = "miss_contact"
    LANDING = "landing"
    EARLY_LIFT = "early_lift"


@dataclass(frozen=True)
class LegStage:
    stage: Stage
    entry_time: float = 0.0


@dataclass(frozen=True)
class ContactEvent:
    kind: EventKind
    leg_index: int
    time: float


@dataclass(frozen=True)
class FsmLimits:
    """Calibrated switching thresholds for one leg."""

    leg_length: float = 0.4
    extension_ratio: float = 0.95  # miss-contact threshold on extension
    force_threshold: float = 4.0  # N, landing confirmation
    force_hysteresis: float = 0.05  # fraction of force_threshold
    abduction_limit: float = np.deg2rad(40.5)
    touchdown_phase: float = 0.95  # leg-local phase at which touchdown starts
    stance_end_phase: float = 0.5  # duty factor
    reposition_duration: float = 0.12  # s

    @classmethod
    def for_model(cls, model, **overrides) -> "FsmLimits":
        """Thresholds derived from the robot model.

        Landing force threshold is 15% of the per-leg share of total
        weight, with 5% hysteresis.
        """
        defaults = dict(
            leg_length=model.leg_length,
            force_threshold=0.15 * model.weight / 4,
            abduction_limit=model.abduction_limit,
        )
        defaults.update(overrides)
        return cls(**defaults)


@dataclass(frozen=True)
class FsmInputs:
    """One sensor sample for one leg."""

    clock_phase: float  # leg-local gait phase in [0, 1)
    leg_extension: float  # m, hip-to-foot distance
    abduction_angle: float  # rad, absolute
    contact_force_z: float  # N, sensed normal force
    time: float  # s


def fsm_update(
    stage: LegStage, inputs: FsmInputs, limits: FsmLimits
) -> tuple[LegStage, ContactEvent | None]:
    """Advance one leg's contact FSM by one sensor sample.

    Total: every (stage, input) pair has exactly one successor.  The
    returned event's leg_index is -1; the caller owns the leg identity.
    """
    t = inputs.time
    phase = inputs.clock_phase % 1.0
    in_nominal_stance = phase < limits.stance_end_phase
    force_on = inputs.contact_force_z >= limits.force_threshold

    if stage.stage is Stage.SWING:
        if phase >= limits.touchdown_phase or in_nominal_stance:
            return LegStage(Stage.TOUCHDOWN, t), None
        return stage, None

    if stage.stage is Stage.TOUCHDOWN:
        if force_on:
            return LegStage(Stage.STANCE, t), ContactEvent(EventKind.LANDING, -1, t)
        if inputs.leg_extension >= limits.extension_ratio * limits.leg_length:
            return (
                LegStage(Stage.REPOSITION, t),
                ContactEvent(EventKind.MISS_CONTACT, -1, t),
            )
        return stage, None

    if stage.stage is Stage.REPOSITION:
        # exit back to touchdown probing once the foot has been re-aimed
        # (or immediately on unexpected force, so landing can be confirmed)
        if force_on or t - stage.entry_time >= limits.reposition_duration:
            return LegStage(Stage.TOUCHDOWN, t), None
        return stage, None

    # Stance
    at_kinematic_limit = (
        inputs.abduction_angle >= limits.abduction_limit
        or inputs.leg_extension >= 0.99 * limits.leg_length
    )
    if in_nominal_stance and at_kinematic_limit:
        return LegStage(Stage.SWING, t), ContactEvent(EventKind.EARLY_LIFT, -1, t)
    if not in_nominal_stance and phase < limits.touchdown_phase:
        # the gait clock ends the stance; the force controller unloads the
        # leg once it leaves the stance set.  A leg already back on the
        # ground inside the touchdown window stays in stance through the
        # phase wrap instead of being cycled out and straight back in.
        return LegStage(Stage.SWING, t), None
    return stage, None


# ---------------------------------------------------------------------------
# terrain estimation
# ---------------------------------------------------------------------------


class TerrainEstimate:
    """Auto-growing elevation estimate keyed by foothold history.

    Cells sitting in a leg's swing space hold provisional upper bounds;
    the next confirmed contact of that leg rewrites them all with the
    touchdown height (vertical-drop assumption).
    """

    def __init__(self, origin=(0.0, 0.0), resolution: float = 0.05, shape=(1, 1)):
        self.grid = Heightfield(
            origin=np.asarray(origin, float),
            resolution=resolution,
            heights=np.zeros(shape),
        )
        self.known_mask = np.zeros(shape, dtype=bool)
        self.swing_space: list[list[tuple[int, int]]] = [[], [], [], []]

    @property
    def resolution(self):
        return self.grid.resolution

    def _grow_to_include(self, x: float, y: float) -> None:
        res = self.grid.resolution
        ox, oy = self.grid.origin
        nx, ny = self.grid.heights.shape
        ix = int(round((x - ox) / res))
        iy = int(round((y - oy) / res))
        pad_lo_x = max(0, -ix)
        pad_lo_y = max(0, -iy)
        pad_hi_x = max(0, ix - (nx - 1))
        pad_hi_y = max(0, iy - (ny - 1))
        if pad_lo_x or pad_lo_y or pad_hi_x or pad_hi_y:
            self.grid.heights = np.pad(
                self.grid.heights,
                ((pad_lo_x, pad_hi_x), (pad_lo_y, pad_hi_y)),
            )
            self.known_mask = np.pad(
                self.known_mask,
                ((pad_lo_x, pad_hi_x), (pad_lo_y, pad_hi_y)),
            )
            self.grid.origin = self.grid.origin - res * np.array(
                [pad_lo_x, pad_lo_y], float
            )
            if pad_lo_x or pad_lo_y:
                self.swing_space = [
                    [(i + pad_lo_x, j + pad_lo_y) for i, j in cells]
                    for cells in self.swing_space
                ]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        self._grow_to_include(x, y)
        return self.grid.cell_index(x, y)

    def estimate_at(self, ix: int, iy: int) -> float:
        """Estimated height; unknown cells read as +inf (no upper bound)."""
        if not self.known_mask[ix, iy]:
            return np.inf
        return float(self.grid.heights[ix, iy])

    def snapshot(self) -> Heightfield:
        return Heightfield(
            origin=self.grid.origin.copy(),
            resolution=self.grid.resolution,
            heights=self.grid.heights.copy(),
        )


def terrain_update(
    est: TerrainEstimate, contact_state, foot_positions
) -> TerrainEstimate:
    """One tick of the foothold-history estimator.

    Legs are processed in index order; when two feet map to the same
    cell in one tick, the later leg wins.
    """
    contact_state = np.asarray(contact_state, dtype=bool).reshape(4)
    foot_positions = np.asarray(foot_positions, float).reshape(4, 3)
    for leg in range(4):
        x, y, z = foot_positions[leg]
        ix, iy = est.cell_of(x, y)
        if not contact_state[leg]:
            if z < est.estimate_at(ix, iy):
                est.grid.heights[ix, iy] = z
                est.known_mask[ix, iy] = True
                est.swing_space[leg].append((ix, iy))
        else:
            est.grid.heights[ix, iy] = z
            est.known_mask[ix, iy] = True
            while est.swing_space[leg]:
                px, py = est.swing_space[leg].pop()
                est.grid.heights[px, py] = z
                est.known_mask[px, py] = True
    return est


def postprocess(est: TerrainEstimate, filter_size: int = 3) -> Heightfield:
    """Inpaint unknown cells from known neighborhoods, then mean-filter.

    Inpainting dilates the known region one ring at a time, each new
    cell taking the mean of its known 8-neighbors; passes are bounded by
    the grid diagonal.  The estimate itself (and its known mask) is not
    modified.
    """
    if not est.known_mask.any():
        raise DataError("terrain estimate has no known cells to post-process")
    heights = est.grid.heights.copy()
    known = est.known_mask.copy()
    nx, ny = heights.shape
    max_passes = nx + ny
    for _ in range(max_passes):
        if known.all():
            break
        filled = heights * known
        neighbor_sum = np.zeros_like(heights)
        neighbor_cnt = np.zeros_like(heights)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                neighbor_sum += np.roll(np.roll(filled, dx, 0), dy, 1) * _shift_valid(
                    known, dx, dy
                )
                neighbor_cnt += _shift_valid(known, dx, dy)
        newly = (~known) & (neighbor_cnt > 0)
        heights[newly] = neighbor_sum[newly] / neighbor_cnt[newly]
        known |= newly
    smoothed = uniform_filter(heights, size=filter_size, mode="nearest")
    return Heightfield(
        origin=est.grid.origin.copy(), resolution=est.grid.resolution, heights=smoothed
    )


def _shift_valid(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Known-mask shifted by (dx, dy) with zeros rolled in at the edges."""
    out = np.roll(np.roll(mask.astype(float), dx, 0), dy, 1)
    if dx == 1:
        out[0, :] = 0
    elif dx == -1:
        out[-1, :] = 0
    if dy == 1:
        out[:, 0] = 0
    elif dy == -1:
        out[:, -1] = 0
    return out


def estimation_rmse(
    estimate: Heightfield, truth: Heightfield, region: np.ndarray | None = None
) -> float:
    """Root-mean-square height error over a cell region (default: all).

    The estimate is sampled at the truth grid's cell centers, so the two
    fields may have different origins/resolutions as long as they cover
    the same area.
    """
    nx, ny = truth.heights.shape
    if region is None:
        region = np.ones((nx, ny), dtype=bool)
    region = np.asarray(region, dtype=bool)
    if region.shape != (nx, ny):
        raise DataError("region mask must match the truth grid shape")
    if not region.any():
        raise DataError("empty evaluation region")
    if (estimate.origin == truth.origin).all() and (
        estimate.resolution == truth.resolution
    ) and estimate.heights.shape == truth.heights.shape:
        est_vals = estimate.heights
    else:
        xs = truth.origin[0] + truth.resolution * np.arange(nx)
        ys = truth.origin[1] + truth.resolution * np.arange(ny)
        est_vals = np.array(
            [[estimate.height_at(x, y) for y in ys] for x in xs]
        )
    err = (est_vals - truth.heights)[region]
    return float(np.sqrt(np.mean(err**2)))
