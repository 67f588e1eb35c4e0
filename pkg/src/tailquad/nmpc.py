"""Collocation NMPC for legs and tail.

One SQP core over a backward-Euler collocation transcription, with four
front-ends:

* ``leg_nmpc_step``       — GRFs only; tail states frozen, torques zero.
* ``tail_nmpc_step``      — full state with the leg GRF plan pinned
                             (sequential distributed control).
* ``centralized_nmpc_step`` — GRFs and tail torques jointly.
* ``feedback_tail_step``  — proportional-derivative tail baseline.

The tracking objective is exactly quadratic, so the SQP uses the exact
(Gauss-Newton) Hessian and reduces each iteration to a sparse QP solved
with Clarabel.  Variable elimination keeps problems small: the initial
state, non-contact-leg GRFs, pinned leg inputs, and frozen tail entries
never enter the decision vector.  A warm-start cache keeps later
collocation points glued to a fixed time grid while only the first
element duration tracks wall-clock time.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace

import clarabel
import numpy as np
from scipy import sparse

from . import dynamics as dyn

log = logging.getLogger(__name__)

NX = dyn.NX  # 16 states
NU = dyn.NU  # 12 GRF components + 2 tail torques
TAIL_POS_IDX = (6, 7)
TAIL_VEL_IDX = (14, 15)
TAIL_STATE_IDX = TAIL_POS_IDX + TAIL_VEL_IDX
TAIL_TORQUE_IDX = (12, 13)

DEFAULT_Q = np.array(
    [50.0, 50.0, 100.0, 80.0, 80.0, 40.0, 2.0, 2.0,
     10.0, 10.0, 10.0, 5.0, 5.0, 2.0, 0.2, 0.2]
)
DEFAULT_R = np.concatenate([np.full(12, 1e-3), np.full(2, 1e-2)])


class SolverStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class NmpcProblem:
    """One receding-horizon tracking problem over N collocation elements."""

    model: dyn.RobotModel
    x_initial: np.ndarray  # (16,)
    durations: np.ndarray  # (N,) element durations, first one adjustable
    contact_flags: np.ndarray  # (N, 4) bool; False zeroes that leg's GRF
    foot_positions: np.ndarray  # (N, 4, 3) world GRF application points
    x_ref: np.ndarray  # (N+1, 16)
    u_ref: np.ndarray  # (N, 14)
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R.copy())
    friction_coefficient: float = 0.7
    tail_torque_bound: float = 10.0
    tail_joint_limit: float = np.pi / 2
    pinned_leg_inputs: np.ndarray | None = None  # (N, 12) known GRF plan
    freeze_tail: bool = False  # leg NMPC: tail welded at current pose

    def __post_init__(self):
        N = len(self.durations)
        if N < 1:
            raise ValueError("horizon must contain at least one element")
        if np.any(np.asarray(self.durations) <= 0):
            raise ValueError("element durations must be positive")
        if np.any(np.asarray(self.Q) < 0) or np.any(np.asarray(self.R) < 0):
            raise ValueError("objective weights must be non-negative")
        for name, arr, shape in [
            ("x_initial", self.x_initial, (NX,)),
            ("contact_flags", self.contact_flags, (N, 4)),
            ("foot_positions", self.foot_positions, (N, 4, 3)),
            ("x_ref", self.x_ref, (N + 1, NX)),
            ("u_ref", self.u_ref, (N, NU)),
        ]:
            if np.asarray(arr).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if self.pinned_leg_inputs is not None and np.asarray(
            self.pinned_leg_inputs
        ).shape != (N, 12):
            raise ValueError("pinned_leg_inputs must have shape (N, 12)")

    @property
    def horizon(self) -> int:
        return len(self.durations)


@dataclass
class NmpcSolution:
    xs: np.ndarray  # (N+1, 16)
    us: np.ndarray  # (N, 14)
    objective: float
    status: SolverStatus
    solve_time: float
    iterations: int
    kkt_residual: float = np.nan


@dataclass
class WarmstartCache:
    """Previous solution plus the fixed collocation-grid anchor.

    ``grid_anchor`` is the absolute time of the end of the first
    element; later collocation points sit at multiples of ``grid_step``
    after it.  Re-solving between two grid points shortens only the
    first element; crossing grid points shifts the cached trajectories.
    """

    xs: np.ndarray | None = None
    us: np.ndarray | None = None
    grid_anchor: float = 0.0
    grid_step: float = 0.04


def reanchor_warmstart(warm: WarmstartCache, now: float) -> np.ndarray:
    """Align the horizon with the fixed collocation grid at time ``now``.

    Returns the element durations [t_0, step, step, ...] where t_0 is
    the remaining time to the next grid point.  Shifts the cached
    trajectories in place only when grid points have been crossed;
    repeated calls inside one grid cell are idempotent.
    """
    step = warm.grid_step
    if now >= warm.grid_anchor:
        k = int(np.floor((now - warm.grid_anchor) / step)) + 1
        warm.grid_anchor += k * step
        if warm.xs is not None:
            n = len(warm.us)
            k_eff = min(k, n)
            warm.xs = np.vstack(
                [warm.xs[k_eff:], np.repeat(warm.xs[-1:], k_eff, axis=0)]
            )
            warm.us = np.vstack(
                [warm.us[k_eff:], np.repeat(warm.us[-1:], k_eff, axis=0)]
            )
    t0 = warm.grid_anchor - now
    if t0 <= 0 or t0 > step + 1e-12:
        raise ValueError("warm-start anchor out of range after re-anchoring")
    n = len(warm.us) if warm.us is not None else 1
    return np.concatenate([[t0], np.full(n - 1, step)])


# ---------------------------------------------------------------------------
# transcription
# ---------------------------------------------------------------------------


class _Transcription:
    """Maps the condensed decision vector to full (xs, us) trajectories."""

    def __init__(self, prob: NmpcProblem):
        self.prob = prob
        N = prob.horizon

        if prob.freeze_tail:
            self.free_x = [i for i in range(NX) if i not in TAIL_STATE_IDX]
            self.res_rows = [i for i in range(NX) if i not in TAIL_STATE_IDX]
        else:
            self.free_x = list(range(NX))
            self.res_rows = list(range(NX))
        self.nxf = len(self.free_x)
        self.nres = len(self.res_rows)

        # fixed tail state entries (leg NMPC welds the tail at its pose)
        self.fixed_x = np.zeros(NX)
        if prob.freeze_tail:
            self.fixed_x[list(TAIL_POS_IDX)] = prob.x_initial[list(TAIL_POS_IDX)]

        # per-element free input indices
        self.free_u: list[list[int]] = []
        for i in range(N):
            idx: list[int] = []
            if prob.pinned_leg_inputs is None:
                for leg in range(4):
                    if prob.contact_flags[i, leg]:
                        idx.extend(range(3 * leg, 3 * leg + 3))
            if not prob.freeze_tail:
                idx.extend(TAIL_TORQUE_IDX)
            self.free_u.append(idx)

        self.x_off = [k * self.nxf for k in range(N)]  # x_1 .. x_N
        off = N * self.nxf
        self.u_off = []
        for i in range(N):
            self.u_off.append(off)
            off += len(self.free_u[i])
        self.nz = off

    def fixed_u(self, i: int) -> np.ndarray:
        u = np.zeros(NU)
        if self.prob.pinned_leg_inputs is not None:
            u[:12] = self.prob.pinned_leg_inputs[i]
        return u

    def expand(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        prob = self.prob
        N = prob.horizon
        xs = np.tile(self.fixed_x, (N + 1, 1))
        xs[0] = prob.x_initial
        us = np.zeros((N, NU))
        for k in range(N):
            xs[k + 1, self.free_x] = z[self.x_off[k] : self.x_off[k] + self.nxf]
            us[k] = self.fixed_u(k)
            us[k, self.free_u[k]] = z[self.u_off[k] : self.u_off[k] + len(self.free_u[k])]
        return xs, us

    def condense(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        z = np.zeros(self.nz)
        for k in range(self.prob.horizon):
            z[self.x_off[k] : self.x_off[k] + self.nxf] = xs[k + 1, self.free_x]
            z[self.u_off[k] : self.u_off[k] + len(self.free_u[k])] = us[
                k, self.free_u[k]
            ]
        return z


def _objective(prob: NmpcProblem, xs: np.ndarray, us: np.ndarray) -> float:
    dx = xs[1:] - prob.x_ref[1:]
    du = us - prob.u_ref
    return float(np.sum(dx**2 * prob.Q) + np.sum(du**2 * prob.R))


def _objective_quadratic(tr: _Transcription):
    """Constant Hessian diagonal and the gradient offset of the objective."""
    prob = tr.prob
    N = prob.horizon
    Hd = np.zeros(tr.nz)
    z_ref = np.zeros(tr.nz)
    for k in range(N):
        Hd[tr.x_off[k] : tr.x_off[k] + tr.nxf] = 2.0 * prob.Q[tr.free_x]
        z_ref[tr.x_off[k] : tr.x_off[k] + tr.nxf] = prob.x_ref[k + 1, tr.free_x]
        sl = slice(tr.u_off[k], tr.u_off[k] + len(tr.free_u[k]))
        Hd[sl] = 2.0 * prob.R[tr.free_u[k]]
        z_ref[sl] = prob.u_ref[k, tr.free_u[k]]
    return Hd, z_ref


def _dynamics_residual(prob: NmpcProblem, tr: _Transcription, xs, us) -> np.ndarray:
    r = dyn.residual_batch(
        prob.model, xs[:-1], xs[1:], us, prob.foot_positions, prob.durations
    )
    return r[:, tr.res_rows].ravel()


def _dynamics_jacobian(prob: NmpcProblem, tr: _Transcription, xs, us):
    jx0, jx1, ju = dyn.residual_jacobian_batch(
        prob.model, xs[:-1], xs[1:], us, prob.foot_positions, prob.durations
    )
    N = prob.horizon
    rows, cols, vals = [], [], []
    for k in range(N):
        r0 = k * tr.nres
        a = jx1[k][np.ix_(tr.res_rows, tr.free_x)]
        rr, cc = np.nonzero(np.ones_like(a))
        rows.append(r0 + rr)
        cols.append(tr.x_off[k] + cc)
        vals.append(a.ravel())
        if k > 0:
            b = jx0[k][np.ix_(tr.res_rows, tr.free_x)]
            rows.append(r0 + rr)
            cols.append(tr.x_off[k - 1] + cc)
            vals.append(b.ravel())
        if tr.free_u[k]:
            c = ju[k][np.ix_(tr.res_rows, tr.free_u[k])]
            rr2, cc2 = np.nonzero(np.ones_like(c))
            rows.append(r0 + rr2)
            cols.append(tr.u_off[k] + cc2)
            vals.append(c.ravel())
    return sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N * tr.nres, tr.nz),
    )


def _inequalities(prob: NmpcProblem, tr: _Transcription):
    """Linear inequalities A z <= b: friction pyramid, torque and joint
    bounds, all expressed directly in the condensed variables."""
    mu = prob.friction_coefficient
    rows, cols, vals, b = [], [], [], []
    m = 0

    def add(coeffs, rhs):
        nonlocal m
        for col, val in coeffs:
            rows.append(m)
            cols.append(col)
            vals.append(val)
        b.append(rhs)
        m += 1

    for k in range(prob.horizon):
        fu = tr.free_u[k]
        for leg in range(4):
            fx, fy, fz = 3 * leg, 3 * leg + 1, 3 * leg + 2
            if fx not in fu:
                continue
            cx = tr.u_off[k] + fu.index(fx)
            cy = tr.u_off[k] + fu.index(fy)
            cz = tr.u_off[k] + fu.index(fz)
            add([(cz, -1.0)], 0.0)  # f_z >= 0
            add([(cx, 1.0), (cz, -mu)], 0.0)  # |f_x| <= mu f_z
            add([(cx, -1.0), (cz, -mu)], 0.0)
            add([(cy, 1.0), (cz, -mu)], 0.0)  # |f_y| <= mu f_z
            add([(cy, -1.0), (cz, -mu)], 0.0)
        for j, torque_idx in enumerate(TAIL_TORQUE_IDX):
            if torque_idx not in fu:
                continue
            c = tr.u_off[k] + fu.index(torque_idx)
            add([(c, 1.0)], prob.tail_torque_bound)
            add([(c, -1.0)], prob.tail_torque_bound)
        if not prob.freeze_tail:
            for j, pos_idx in enumerate(TAIL_POS_IDX):
                c = tr.x_off[k] + tr.free_x.index(pos_idx)
                add([(c, 1.0)], prob.tail_joint_limit)
                add([(c, -1.0)], prob.tail_joint_limit)
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(m, tr.nz))
    return A, np.array(b)


def _solve_qp(Hd, g, J_eq, c_eq, A_in, b_in):
    """min 0.5 dz' H dz + g' dz  s.t.  J_eq dz = -c_eq,  A_in dz <= b_in."""
    nz = len(g)
    P = sparse.diags(Hd + 1e-9, format="csc")
    A = sparse.vstack([J_eq, A_in]).tocsc()
    b = np.concatenate([-c_eq, b_in])
    cones = [clarabel.ZeroConeT(J_eq.shape[0]), clarabel.NonnegativeConeT(A_in.shape[0])]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    solver = clarabel.DefaultSolver(P, np.asarray(g), A, b, cones, settings)
    res = solver.solve()
    status = str(res.status)
    if status not in ("Solved", "AlmostSolved"):
        return None, None, status
    return np.asarray(res.x), np.asarray(res.z), status


def solve(
    prob: NmpcProblem,
    warm: WarmstartCache | None = None,
    max_iterations: int = 100,
) -> NmpcSolution:
    """SQP with l1-merit line search over the collocation NLP.

    Converged means the QP step has become negligible while all
    constraints are within feasibility tolerance; MaxIter returns the
    best iterate found; Infeasible reflects an infeasible QP subproblem.
    """
    t_start = time.perf_counter()
    tr = _Transcription(prob)
    Hd, z_ref = _objective_quadratic(tr)
    A_in, b_in = _inequalities(prob, tr)

    # initial iterate: warm start when shapes match, else the reference
    xs = prob.x_ref.copy()
    us = prob.u_ref.copy()
    if warm is not None and warm.xs is not None and warm.xs.shape == xs.shape:
        xs, us = warm.xs.copy(), warm.us.copy()
    z = tr.condense(xs, us)
    # project the iterate into the linear feasible set cheaply
    z = np.clip(z, -1e6, 1e6)
    xs, us = tr.expand(z)

    kkt_tol = 1e-6
    feas_tol = 1e-6
    max_iter = max_iterations
    nu = 1.0  # l1 merit penalty
    status = SolverStatus.MAX_ITER
    kkt = np.nan

    def merit(zv):
        xsv, usv = tr.expand(zv)
        c = _dynamics_residual(prob, tr, xsv, usv)
        viol = np.maximum(A_in @ zv - b_in, 0.0)
        return (
            _objective(prob, xsv, usv) + nu * np.abs(c).sum() + nu * viol.sum(),
            c,
            viol,
        )

    it = 0
    for it in range(1, max_iter + 1):
        c_eq = _dynamics_residual(prob, tr, xs, us)
        J_eq = _dynamics_jacobian(prob, tr, xs, us)
        g = Hd * (z - z_ref)
        dz, duals, qp_status = _solve_qp(Hd, g, J_eq, c_eq, A_in, b_in)
        if dz is None:
            if "Infeasible" in qp_status:
                status = SolverStatus.INFEASIBLE
                break
            log.warning("QP subproblem returned %s; stopping", qp_status)
            break
        if duals is not None and duals.size:
            nu = max(nu, 2.0 * float(np.max(np.abs(duals))))

        step = float(np.max(np.abs(dz)))
        viol_now = max(
            float(np.max(np.abs(c_eq), initial=0.0)),
            float(np.max(A_in @ z - b_in, initial=0.0)),
        )
        pred_red = -(float(g @ dz) + 0.5 * float(dz @ (Hd * dz)))
        obj_now = _objective(prob, xs, us)
        small_step = step <= kkt_tol * (1.0 + float(np.max(np.abs(z))))
        no_progress = pred_red <= 1e-8 * (1.0 + abs(obj_now))
        if viol_now <= feas_tol and (small_step or no_progress):
            status = SolverStatus.CONVERGED
            kkt = step
            break

        # backtracking line search on the l1 merit function
        m0, _, _ = merit(z)
        alpha = 1.0
        accepted = False
        for _ in range(20):
            z_try = z + alpha * dz
            m_try, _, _ = merit(z_try)
            if m_try <= m0 - 1e-4 * alpha * step:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            z_try = z + alpha * dz  # take the smallest step anyway
        z = z_try
        xs, us = tr.expand(z)

    xs, us = tr.expand(z)
    return NmpcSolution(
        xs=xs,
        us=us,
        objective=_objective(prob, xs, us),
        status=status,
        solve_time=time.perf_counter() - t_start,
        iterations=it,
        kkt_residual=kkt,
    )


def check_solution(prob: NmpcProblem, sol: NmpcSolution) -> dict:
    """Max constraint violations of a solution (for assertions/telemetry)."""
    tr = _Transcription(prob)
    c = _dynamics_residual(prob, tr, sol.xs, sol.us)
    A_in, b_in = _inequalities(prob, tr)
    z = tr.condense(sol.xs, sol.us)
    viol = A_in @ z - b_in
    sel = 0.0
    for k in range(prob.horizon):
        for leg in range(4):
            if not prob.contact_flags[k, leg]:
                sel = max(sel, float(np.max(np.abs(sol.us[k, 3 * leg : 3 * leg + 3]))))
    return {
        "dynamics": float(np.max(np.abs(c), initial=0.0)),
        "inequality": float(np.max(viol, initial=0.0)),
        "selection": sel,
        "initial": float(np.max(np.abs(sol.xs[0] - prob.x_initial))),
    }


# ---------------------------------------------------------------------------
# controller front-ends
# ---------------------------------------------------------------------------


def _tracking_problem(
    model,
    x_initial,
    durations,
    contact_flags,
    foot_positions,
    x_ref,
    u_ref=None,
    **kwargs,
) -> NmpcProblem:
    durations = np.asarray(durations, float)
    N = len(durations)
    if u_ref is None:
        u_ref = np.zeros((N, NU))
    return NmpcProblem(
        model=model,
        x_initial=np.asarray(x_initial, float),
        durations=durations,
        contact_flags=np.asarray(contact_flags, bool),
        foot_positions=np.asarray(foot_positions, float),
        x_ref=np.asarray(x_ref, float),
        u_ref=np.asarray(u_ref, float),
        friction_coefficient=model.friction_coefficient,
        **kwargs,
    )


def leg_nmpc_step(
    model, x_initial, durations, contact_flags, foot_positions, x_ref,
    u_ref=None, warm: WarmstartCache | None = None, max_iterations: int = 100,
    **kwargs,
) -> NmpcSolution:
    """GRF plan with the tail welded at its current pose and zero torque."""
    prob = _tracking_problem(
        model, x_initial, durations, contact_flags, foot_positions, x_ref,
        u_ref, freeze_tail=True, **kwargs,
    )
    sol = solve(prob, warm, max_iterations)
    if warm is not None:
        warm.xs, warm.us = sol.xs, sol.us
    return sol


def tail_nmpc_step(
    model, x_initial, durations, contact_flags, foot_positions, x_ref,
    leg_grf_plan, u_ref=None, warm: WarmstartCache | None = None,
    max_iterations: int = 100, **kwargs,
) -> NmpcSolution:
    """Tail torque plan with the leg GRF plan pinned as known inputs."""
    prob = _tracking_problem(
        model, x_initial, durations, contact_flags, foot_positions, x_ref,
        u_ref, pinned_leg_inputs=np.asarray(leg_grf_plan, float), **kwargs,
    )
    sol = solve(prob, warm, max_iterations)
    if warm is not None:
        warm.xs, warm.us = sol.xs, sol.us
    return sol


def centralized_nmpc_step(
    model, x_initial, durations, contact_flags, foot_positions, x_ref,
    u_ref=None, warm: WarmstartCache | None = None, max_iterations: int = 100,
    **kwargs,
) -> NmpcSolution:
    """GRFs and tail torques determined jointly (baseline)."""
    prob = _tracking_problem(
        model, x_initial, durations, contact_flags, foot_positions, x_ref,
        u_ref, **kwargs,
    )
    sol = solve(prob, warm, max_iterations)
    if warm is not None:
        warm.xs, warm.us = sol.xs, sol.us
    return sol


def feedback_tail_step(
    x: np.ndarray,
    kp: float = 40.0,
    kd: float = 4.0,
    torque_bound: float = 10.0,
    orientation_ref: np.ndarray | None = None,
) -> np.ndarray:
    """Proportional tail baseline: swing the tail against body roll and
    pitch error, saturated at the torque bound.

    The body feels the reaction of the joint torque, so the restoring
    body moment -kp*err - kd*rate is produced by commanding its negative
    at the tail joints.
    """
    if kp < 0 or kd < 0:
        raise ValueError("gains must be non-negative")
    x = np.asarray(x, float)
    err = x[3:5].copy()
    if orientation_ref is not None:
        err -= np.asarray(orientation_ref, float)[:2]
    rate = x[11:13]
    tau = kp * err + kd * rate
    return np.clip(tau, -torque_bound, torque_bound)
