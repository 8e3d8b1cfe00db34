"""Splitting-based trajectory optimizer for parking maneuvers.

The nonconvex parking problem couples bicycle dynamics, per-step travel
times, and certificate-based collision avoidance.  plan() alternates
over four variable groups, each of which is convex with the others held
fixed:

  1. separation certificates (lam, mu, d) per knot/obstacle pair,
  2. speeds and accelerations (v, a),
  3. per-step durations t,
  4. poses, steering, and clearance floors (x, y, heading, delta, d)
     through a small trust-region SQP over linearized trig terms,

followed by a multiplier ascent on the scaled penalty terms.  Velocity
keeps the travel direction assigned by the warm start (sign constraints
per step), so gear switches happen exactly where the coarse planner put
them.

Every block update is wrapped in a keep-better comparison against the
exact augmented Lagrangian, which makes per-block descent hold to float
precision even when an inner solver returns a slightly loose iterate.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math
import time

import numpy as np
import scipy.sparse as sp

from .conic import ConeSpec, solve_cone_qp
from .config import PlannerWeights, SolverConfig
from .dual_collision import (
    DualBlockFailure,
    DualState,
    certificate_coefficients,
    solve_dual_block_multi,
    warmstart_duals_qp,
)
from .geometry import Pose, place_footprint, signed_distance
from .hybrid_astar import (
    CollisionChecker,
    GridConfig,
    InfeasibleProfile,
    NoPathFound,
    GoalInCollision,
    StartInCollision,
    assign_speed_profile,
    plan_coarse,
)
from .scenario import Scenario
from .trajectory import IterationRecord, PlannedTrajectory, SolveReport
from .vehicle import dynamics_defect
from .verify import verify_trajectory

_SQP_TRUST_FLOOR = 1e-6
_SQP_STEP_FLOOR = 1e-10
_MERIT_SLACK = 1e-12
_MM_MAX_ROUNDS = 8
_MM_D_TOL = 3e-5
_MM_STEP_CAP = 0.05
_RHO_WINDOW = 4
_RHO_STALL_FACTOR = 0.5


class WarmStartFailed(RuntimeError):
    """The coarse planner or speed profiling could not seed the solver."""


class SubproblemFailure(RuntimeError):
    """A block solver failed irrecoverably.

    Attributes name the block and, for certificate problems, the
    (knot, obstacle) pair.
    """

    def __init__(self, block: str, knot: int | None = None, obstacle: int | None = None):
        self.block = block
        self.knot = knot
        self.obstacle = obstacle
        loc = ""
        if knot is not None:
            loc = " at knot %d" % knot
            if obstacle is not None:
                loc += ", obstacle %d" % obstacle
        super().__init__("%s block failed%s" % (block, loc))


class SqpStalled(RuntimeError):
    """Pose trust region collapsed without accepting any step."""


class MaxIterationsReached(RuntimeError):
    """Residuals did not meet tolerance; carries the best iterate found."""

    def __init__(self, trajectory: PlannedTrajectory, primal_sq: float, dual_sq: float):
        self.trajectory = trajectory
        self.primal_sq = primal_sq
        self.dual_sq = dual_sq
        super().__init__(
            "no convergence: primal_sq %.3e dual_sq %.3e" % (primal_sq, dual_sq)
        )


@dataclass
class PlannerIterate:
    """All decision variables plus scaled multipliers.

    duals[k][m] holds the multipliers (lam, mu) for free knot k against
    obstacle m (None rows at pinned knots).  The clearance floor shared
    by the certificate and pose blocks lives in d_pose; the d field on a
    stored DualState is a stale solver output, always read d_pose.
    """

    states: np.ndarray            # (N+1, 4)
    controls: np.ndarray          # (N, 2)
    dts: np.ndarray               # (N,)
    gear: np.ndarray              # (N,) fixed travel direction per step
    duals: list                   # [k][m] -> DualState or None
    d_pose: np.ndarray            # (N+1, M)
    eta: np.ndarray               # (N, 4)
    zeta: np.ndarray              # (N+1, M)
    xi: np.ndarray                # (N+1, M, 2)
    sin_l: np.ndarray             # (N+1,) lifted sin(heading)
    cos_l: np.ndarray             # (N+1,)
    tan_l: np.ndarray             # (N,) lifted tan(steering)
    rho: float = 1.0

    def copy(self) -> "PlannerIterate":
        return PlannerIterate(
            states=self.states.copy(),
            controls=self.controls.copy(),
            dts=self.dts.copy(),
            gear=self.gear.copy(),
            duals=[[d for d in row] if row else row for row in self.duals],
            d_pose=self.d_pose.copy(),
            eta=self.eta.copy(),
            zeta=self.zeta.copy(),
            xi=self.xi.copy(),
            sin_l=self.sin_l.copy(),
            cos_l=self.cos_l.copy(),
            tan_l=self.tan_l.copy(),
            rho=self.rho,
        )


@dataclass
class PlanProblem:
    """Static data shared by all block updates."""

    params: object
    weights: PlannerWeights
    config: SolverConfig
    obstacles: list
    reference: np.ndarray         # (N+1, 4) tracking target
    free_knots: np.ndarray        # knots carrying certificates
    pin_goal: bool
    u_hat: np.ndarray | None = None
    executor: ThreadPoolExecutor | None = None

    @property
    def horizon(self) -> int:
        return len(self.reference) - 1

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)


def make_iterate(problem: PlanProblem, states, controls, dts, gear) -> PlannerIterate:
    """Fresh iterate with zero multipliers and empty certificates."""
    n = problem.horizon
    m = problem.n_obstacles
    states = np.array(states, dtype=float)
    controls = np.array(controls, dtype=float)
    dts = np.array(dts, dtype=float)
    free = set(int(k) for k in problem.free_knots)
    duals = [
        [DualState.zeros(len(o.b), -problem.config.eps_clear) for o in problem.obstacles]
        if k in free else None
        for k in range(n + 1)
    ]
    return PlannerIterate(
        states=states,
        controls=controls,
        dts=dts,
        gear=np.array(gear, dtype=int),
        duals=duals,
        d_pose=np.full((n + 1, m), -problem.config.eps_clear),
        eta=np.zeros((n, 4)),
        zeta=np.zeros((n + 1, m)),
        xi=np.zeros((n + 1, m, 2)),
        sin_l=np.sin(states[:, 2]),
        cos_l=np.cos(states[:, 2]),
        tan_l=np.tan(controls[:, 0]),
        rho=problem.config.rho,
    )


# ---------------------------------------------------------------------------
# Objective and augmented Lagrangian


def objective_value(states, controls, dts, reference, weights: PlannerWeights,
                    d_values=None, u_hat=None) -> float:
    """Trajectory cost: tracking, effort, rate smoothing, clearance penalty.

    d_values, when given, is any iterable of clearance floors entering
    the w_d * sum(exp(d)) term.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    dts = np.asarray(dts, dtype=float)
    obj = weights.w_x * float(np.sum((states - np.asarray(reference)) ** 2))
    obj += weights.w_u * float(np.sum(controls ** 2))
    if weights.w_x_rate:
        diffs = np.diff(states, axis=0)
        obj += weights.w_x_rate * float(np.sum(diffs ** 2 / dts[:, None]))
    if weights.w_u_rate and u_hat is not None:
        obj += weights.w_u_rate * float(
            np.sum((controls - np.asarray(u_hat)) ** 2 / dts[:, None])
        )
    if d_values is not None and weights.w_d:
        obj += weights.w_d * float(np.sum(np.exp(np.asarray(d_values, dtype=float))))
    return obj


def _certificate_arrays(it: PlannerIterate, pb: PlanProblem):
    """Per-obstacle stacked certificate coefficients over the free knots.

    Returns (atl, offset, gtm): (F_k, M, 2), (F_k, M), (F_k, M, 2) where
    F_k = len(free_knots).  atl = A^T lam, offset = b^T lam + g^T mu,
    gtm = G^T mu (ego-face matrix transposed times mu).
    """
    free = pb.free_knots
    nf = len(free)
    m = pb.n_obstacles
    atl = np.empty((nf, m, 2))
    offset = np.empty((nf, m))
    gtm = np.empty((nf, m, 2))
    shape = pb.params.shape
    for j, obs in enumerate(pb.obstacles):
        lams = np.stack([it.duals[k][j].lam for k in free])
        mus = np.stack([it.duals[k][j].mu for k in free])
        atl[:, j] = lams @ obs.A
        offset[:, j] = lams @ obs.b + mus @ shape.g
        gtm[:, j] = mus @ shape.G
    return atl, offset, gtm


def _gh_residuals(it: PlannerIterate, pb: PlanProblem, atl, offset, gtm):
    """Certificate residuals at the current poses with the pose-group d."""
    free = pb.free_knots
    pos = it.states[free, :2]
    g_res = it.d_pose[free] + np.einsum("fmi,fi->fm", atl, pos) - offset
    c = np.cos(it.states[free, 2])
    s = np.sin(it.states[free, 2])
    h_res = np.empty_like(gtm)
    h_res[:, :, 0] = gtm[:, :, 0] + c[:, None] * atl[:, :, 0] + s[:, None] * atl[:, :, 1]
    h_res[:, :, 1] = gtm[:, :, 1] - s[:, None] * atl[:, :, 0] + c[:, None] * atl[:, :, 1]
    return g_res, h_res


def _indicator_ok(it: PlannerIterate, pb: PlanProblem, tol: float = 1e-7) -> bool:
    p = pb.params
    cfg = pb.config
    u = it.controls
    if float(np.max(np.maximum(u - p.u_max, p.u_min - u))) > tol:
        return False
    if len(u) > 1:
        rate = (u[1:] - u[:-1]) / it.dts[:-1, None]
        if float(np.max(np.maximum(rate - p.rate_max, p.rate_min - rate))) > tol:
            return False
    if float(np.max(np.maximum(it.dts - cfg.t_max, cfg.t_min - it.dts))) > tol:
        return False
    v = it.states[:-1, 3]
    signed = it.gear * v
    if float(signed.min(initial=0.0)) < -tol:
        return False
    if np.any(np.abs(v[it.gear == 0]) > tol):
        return False
    for k in pb.free_knots:
        if float(it.d_pose[k].max(initial=-np.inf)) > -cfg.eps_clear + tol:
            return False
        for j, obs in enumerate(pb.obstacles):
            dual = it.duals[k][j]
            if float(dual.lam.min(initial=0.0)) < -tol:
                return False
            if float(dual.mu.min(initial=0.0)) < -tol:
                return False
            if dual.cone_gap(obs) > tol:
                return False
    return True


def augmented_lagrangian(it: PlannerIterate, pb: PlanProblem,
                         check_feasible: bool = True) -> float:
    """Exact merit: objective plus scaled quadratic penalties.

    Returns +inf when the iterate violates a hard constraint (control or
    time-step box, rate limit, velocity sign, or certificate cone); pass
    check_feasible=False to skip that scan when feasibility is known.
    """
    if check_feasible and not _indicator_ok(it, pb):
        return math.inf
    obj = objective_value(
        it.states, it.controls, it.dts, pb.reference, pb.weights,
        d_values=it.d_pose[pb.free_knots], u_hat=pb.u_hat,
    )
    defect = dynamics_defect(it.states, it.controls, it.dts, pb.params.wheelbase)
    pen = float(np.sum((defect + it.eta) ** 2))
    if len(pb.free_knots):
        atl, offset, gtm = _certificate_arrays(it, pb)
        g_res, h_res = _gh_residuals(it, pb, atl, offset, gtm)
        pen += float(np.sum((g_res + it.zeta[pb.free_knots]) ** 2))
        pen += float(np.sum((h_res + it.xi[pb.free_knots]) ** 2))
    return obj + 0.5 * it.rho * pen


# ---------------------------------------------------------------------------
# Block 1: separation certificates


def update_certificates(it: PlannerIterate, pb: PlanProblem) -> None:
    """Refresh (lam, mu, d) for every free knot/obstacle pair.

    The clearance floor d is shared with the pose block through d_pose;
    this block re-solves it jointly with the multipliers.  Each pair
    minimizes its own slice of the augmented Lagrangian with the
    exponential clearance term linearized at the incoming d; a final
    exact-merit comparison keeps the old certificate when the linearized
    step would not lower the true cost.
    """
    free = pb.free_knots
    if len(free) == 0:
        return
    poses = it.states[free, :3]
    shape = pb.params.shape
    w_d = pb.weights.w_d
    eps = pb.config.eps_clear
    nf = len(free)

    # obstacles with the same face count share a cone layout, so their
    # pair problems can run through the kernel as one mixed batch
    groups: dict[int, list[int]] = {}
    for j, obs in enumerate(pb.obstacles):
        groups.setdefault(len(obs.b), []).append(j)

    def solve_group(js):
        obs_list = [pb.obstacles[j] for j in js]
        obs_rows = np.repeat(np.arange(len(js)), nf)
        pose_rows = np.tile(np.arange(nf), len(js))
        pw = poses[pose_rows]
        a_b = np.stack([o.A for o in obs_list])[obs_rows]
        b_b = np.stack([o.b for o in obs_list])[obs_rows]
        zetas = np.concatenate([it.zeta[free, j] for j in js])
        xis = np.concatenate([it.xi[free, j] for j in js])
        olds = [it.duals[k][j] for j in js for k in free]
        lam_f, mu_f = _stack_certs(olds)
        d_cur = np.concatenate([it.d_pose[free, j] for j in js])
        # re-optimize the floor exactly for the incoming multipliers
        # first, so pose and multiplier drift since the last sweep is
        # absorbed before any QP round (1-D convex, bisection)
        if w_d > 0.0:
            d_cur = _polish_d(lam_f, mu_f, pw, a_b, b_b, shape.g, zetas,
                              it.rho, w_d, eps)
        d_fall = d_cur.copy()
        cands = list(olds)
        d_out = d_cur.copy()
        active = np.arange(nf * len(js))
        # majorize-minimize rounds: solve the conic QP with the
        # exponential majorized at the latest d (the tight step cap
        # keeps the model near-exact), then polish d again for the
        # returned multipliers.  Pairs whose floor stopped moving drop
        # out of the batch.
        for _ in range(_MM_MAX_ROUNDS):
            try:
                sols = solve_dual_block_multi(
                    pw[active], obs_list, obs_rows[active], shape,
                    zetas[active], xis[active], it.rho, d_cur[active],
                    w_d=w_d, eps_clear=eps, tol=1e-7,
                    step_cap=_MM_STEP_CAP,
                )
            except DualBlockFailure as exc:
                raise SubproblemFailure("certificate") from exc
            if w_d == 0.0:
                for t, i in enumerate(active):
                    cands[i] = sols[t]
                    d_out[i] = sols[t].d
                break
            lam_s, mu_s = _stack_certs(sols)
            d_pol = _polish_d(lam_s, mu_s, pw[active], a_b[active],
                              b_b[active], shape.g, zetas[active],
                              it.rho, w_d, eps)
            moved = np.abs(d_pol - d_cur[active]) > _MM_D_TOL
            for t, i in enumerate(active):
                cands[i] = sols[t]
                d_out[i] = d_pol[t]
                d_cur[i] = d_pol[t]
            if not moved.any():
                break
            active = active[moved]
        lam_n, mu_n = _stack_certs(cands)
        m_new = _pair_merits(lam_n, mu_n, d_out, pw, a_b, b_b, shape,
                             zetas, xis, it.rho, w_d)
        m_old = _pair_merits(lam_f, mu_f, d_fall, pw, a_b, b_b, shape,
                             zetas, xis, it.rho, w_d)
        take = m_new <= m_old
        return js, pose_rows, obs_rows, cands, d_out, olds, d_fall, take

    group_lists = list(groups.values())
    if pb.executor is not None and len(group_lists) > 1:
        results = list(pb.executor.map(solve_group, group_lists))
    else:
        results = [solve_group(js) for js in group_lists]
    for js, pose_rows, obs_rows, cands, d_out, olds, d_fall, take in results:
        for i in range(len(cands)):
            k = free[pose_rows[i]]
            j = js[obs_rows[i]]
            if take[i]:
                it.duals[k][j] = cands[i]
                it.d_pose[k, j] = d_out[i]
            else:
                it.duals[k][j] = olds[i]
                it.d_pose[k, j] = d_fall[i]


def _stack_certs(cands):
    """Stack lam and mu from a list of DualState into (B, n) arrays."""
    lams = np.stack([c.lam for c in cands])
    mus = np.stack([c.mu for c in cands])
    return lams, mus


def _polish_d(lams, mus, poses, a_b, b_b, g_ego, zetas, rho, w_d, eps_clear):
    """Exact clearance floors for fixed multipliers, one pair per row.

    Minimizes w_d e^d + (rho/2)(d + c0)^2 over d <= -eps_clear where c0
    collects the pose and multiplier terms of the G residual.  a_b and
    b_b carry each row's obstacle halfplanes.  The derivative is
    strictly increasing, so bisection on it is safe.
    """
    atl = np.einsum("bn,bnj->bj", lams, a_b)
    off = np.einsum("bn,bn->b", lams, b_b) + mus @ g_ego
    c0 = np.einsum("bi,bi->b", atl, poses[:, :2]) - off + zetas

    def dpsi(d):
        return w_d * np.exp(d) + rho * (d + c0)

    hi = np.full(len(c0), -eps_clear)
    at_bound = dpsi(hi) <= 0.0
    lo = np.minimum(-eps_clear, -c0) - w_d / rho - 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        pos = dpsi(mid) > 0.0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    return np.where(at_bound, -eps_clear, 0.5 * (lo + hi))


def _pair_merits(lams, mus, d, poses, a_b, b_b, shape, zetas, xis, rho, w_d):
    """Vectorized _pair_merit over a stack of (pose, obstacle) rows."""
    atl = np.einsum("bn,bnj->bj", lams, a_b)
    off = np.einsum("bn,bn->b", lams, b_b) + mus @ shape.g
    gtm = mus @ shape.G
    g_res = d + np.einsum("bj,bj->b", atl, poses[:, :2]) - off
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    h1 = gtm[:, 0] + c * atl[:, 0] + s * atl[:, 1]
    h2 = gtm[:, 1] - s * atl[:, 0] + c * atl[:, 1]
    pen = (g_res + zetas) ** 2
    pen += (h1 + xis[:, 0]) ** 2 + (h2 + xis[:, 1]) ** 2
    return w_d * np.exp(d) + 0.5 * rho * pen


def _pair_merit(it: PlannerIterate, pb: PlanProblem, k: int, j: int,
                dual: DualState, d: float) -> float:
    """Exact certificate-block cost for one pair at the current pose."""
    x, y, heading = it.states[k, :3]
    obs = pb.obstacles[j]
    shape = pb.params.shape
    co = certificate_coefficients(dual, obs, shape)
    g = d + co.atl[0] * x + co.atl[1] * y - co.offset
    c, s = math.cos(heading), math.sin(heading)
    h1 = co.gtm[0] + c * co.atl[0] + s * co.atl[1]
    h2 = co.gtm[1] - s * co.atl[0] + c * co.atl[1]
    pen = (g + it.zeta[k, j]) ** 2
    pen += (h1 + it.xi[k, j, 0]) ** 2 + (h2 + it.xi[k, j, 1]) ** 2
    return pb.weights.w_d * math.exp(d) + 0.5 * it.rho * pen


# ---------------------------------------------------------------------------
# Block 2: speeds and accelerations


def update_controls(it: PlannerIterate, pb: PlanProblem) -> None:
    """One convex QP over (v, a) with poses, times, and steering fixed.

    Velocity enters the position/heading updates linearly once the trig
    factors are frozen, so the only couplings are the tridiagonal
    v-accel chain and the accel rate limits.
    """
    n = pb.horizon
    p = pb.params
    w = pb.weights
    rho = it.rho
    # v_k is a variable at knots whose outgoing step moves; dwell knots
    # and the pinned endpoints stay fixed.
    vlist = [k for k in range(1, n) if it.gear[k] != 0]
    if not pb.pin_goal:
        vlist.append(n)
    vpos = {k: i for i, k in enumerate(vlist)}
    nv = len(vlist)
    nz = nv + n
    apos = lambda k: nv + k

    rows_i: list[int] = []
    rows_j: list[int] = []
    rows_v: list[float] = []
    wts: list[float] = []
    res: list[float] = []
    row = 0

    def v_fixed(k: int) -> float:
        return float(it.states[k, 3])

    def add_row(weight, cols, vals, r):
        nonlocal row
        for cj, vv in zip(cols, vals):
            rows_i.append(row)
            rows_j.append(cj)
            rows_v.append(vv)
        wts.append(weight)
        res.append(r)
        row += 1

    ref_v = pb.reference[:, 3]
    for k in vlist:
        add_row(w.w_x, [vpos[k]], [1.0], -float(ref_v[k]))
    for k in range(n):
        add_row(w.w_u, [apos(k)], [1.0], 0.0)
        if w.w_u_rate and pb.u_hat is not None:
            add_row(w.w_u_rate / it.dts[k], [apos(k)], [1.0], -float(pb.u_hat[k, 1]))
    if w.w_x_rate:
        for k in range(1, n + 1):
            cols, vals, r = [], [], 0.0
            if k in vpos:
                cols.append(vpos[k]); vals.append(1.0)
            else:
                r += v_fixed(k)
            if (k - 1) in vpos:
                cols.append(vpos[k - 1]); vals.append(-1.0)
            else:
                r -= v_fixed(k - 1)
            add_row(w.w_x_rate / it.dts[k - 1], cols, vals, r)

    cphi = np.cos(it.states[:-1, 2])
    sphi = np.sin(it.states[:-1, 2])
    tand = np.tan(it.controls[:, 0])
    for k in range(n):
        dt = it.dts[k]
        for comp, beta in ((0, dt * cphi[k]), (1, dt * sphi[k]),
                           (2, dt * tand[k] / p.wheelbase)):
            alpha = float(it.states[k, comp] - it.states[k + 1, comp] + it.eta[k, comp])
            if k in vpos:
                add_row(0.5 * rho, [vpos[k]], [beta], alpha)
            elif k == 0 or it.gear[k] == 0:
                # v fixed: the row is constant, nothing to optimize
                pass
        # velocity chain row: v_k + a_k dt - v_{k+1}
        cols, vals, r = [apos(k)], [dt], float(it.eta[k, 3])
        if k in vpos:
            cols.append(vpos[k]); vals.append(1.0)
        else:
            r += v_fixed(k)
        if (k + 1) in vpos:
            cols.append(vpos[k + 1]); vals.append(-1.0)
        else:
            r -= v_fixed(k + 1)
        add_row(0.5 * rho, cols, vals, r)

    J = sp.csr_matrix((rows_v, (rows_i, rows_j)), shape=(row, nz))
    wts_arr = np.asarray(wts)
    resid = np.asarray(res)
    Jw = J.multiply(np.sqrt(wts_arr)[:, None]).tocsr()
    P = 2.0 * (Jw.T @ Jw).toarray()
    q = 2.0 * (Jw.T @ (np.sqrt(wts_arr) * resid))

    gi, gj, gv, h = [], [], [], []
    grow = 0

    def add_ineq(cols, vals, bound):
        nonlocal grow
        for cj, vv in zip(cols, vals):
            gi.append(grow); gj.append(cj); gv.append(vv)
        h.append(bound)
        grow += 1

    for k in range(n):
        add_ineq([apos(k)], [1.0], float(p.u_max[1]))
        add_ineq([apos(k)], [-1.0], float(-p.u_min[1]))
    for k in range(n - 1):
        add_ineq([apos(k + 1), apos(k)], [1.0, -1.0], float(p.rate_max[1] * it.dts[k]))
        add_ineq([apos(k + 1), apos(k)], [-1.0, 1.0], float(-p.rate_min[1] * it.dts[k]))
    for k in vlist:
        if k <= n - 1 and it.gear[k] != 0:
            add_ineq([vpos[k]], [-float(it.gear[k])], 0.0)

    Gm = sp.csr_matrix((gv, (gi, gj)), shape=(grow, nz)).toarray()
    z, report = solve_cone_qp(P, q, Gm, np.asarray(h), ConeSpec(nonneg=grow), tol=1e-9)
    if report.status in ("infeasible", "numerical_failure"):
        raise SubproblemFailure("controls")

    before = augmented_lagrangian(it, pb, check_feasible=False)
    old_v = it.states[:, 3].copy()
    old_a = it.controls[:, 1].copy()
    for k in vlist:
        it.states[k, 3] = z[vpos[k]]
    it.controls[:, 1] = z[nv:]
    after = augmented_lagrangian(it, pb, check_feasible=False)
    if after > before + _MERIT_SLACK:
        it.states[:, 3] = old_v
        it.controls[:, 1] = old_a


# ---------------------------------------------------------------------------
# Block 3: per-step durations


def update_time_steps(it: PlannerIterate, pb: PlanProblem) -> None:
    """Independent scalar minimizations of the AL in each t_k.

    Each step cost is (rho/2)||r0 + rv t||^2 + kappa/t on [t_min, t_max]
    (a convex function), solved by bisection on the derivative and
    guarded by a per-step keep-better comparison.
    """
    n = pb.horizon
    cfg = pb.config
    w = pb.weights
    rho = it.rho
    x = it.states
    v = x[:-1, 3]
    cphi = np.cos(x[:-1, 2])
    sphi = np.sin(x[:-1, 2])
    tand = np.tan(it.controls[:, 0])
    rv = np.column_stack([v * cphi, v * sphi, v * tand / pb.params.wheelbase,
                          it.controls[:, 1]])
    r0 = x[:-1] - x[1:] + it.eta
    a2 = rho * np.einsum("ki,ki->k", rv, rv)
    b1 = rho * np.einsum("ki,ki->k", rv, r0)
    kappa = w.w_x_rate * np.sum(np.diff(x, axis=0) ** 2, axis=1)
    if w.w_u_rate and pb.u_hat is not None:
        kappa = kappa + w.w_u_rate * np.sum((it.controls - pb.u_hat) ** 2, axis=1)

    def dpsi(t):
        return a2 * t + b1 - kappa / (t * t)

    def psi(t):
        return 0.5 * a2 * t * t + b1 * t + kappa / t

    lo = np.full(n, cfg.t_min)
    hi = np.full(n, cfg.t_max)
    at_min = dpsi(lo) >= 0.0
    at_max = dpsi(hi) <= 0.0
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        pos = dpsi(mid) > 0.0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    t_new = np.where(at_min, cfg.t_min, np.where(at_max, cfg.t_max, 0.5 * (lo + hi)))
    keep = psi(t_new) <= psi(it.dts)
    it.dts = np.where(keep, t_new, it.dts)


# ---------------------------------------------------------------------------
# Block 4: poses, steering, clearance floors


def update_pose_block(it: PlannerIterate, pb: PlanProblem) -> dict:
    """Trust-region SQP over (x, y, heading, steering, d).

    Each inner iteration linearizes sin/cos/tan about the current point,
    solves one sparse QP in the step variables, and accepts only when
    the exact augmented Lagrangian decreases; rejection halves the trust
    boxes.  Raises SqpStalled when the region collapses below the floor
    with no accepted step; otherwise reports acceptance statistics.
    """
    cfg = pb.config
    n = pb.horizon
    free_pose = [k for k in range(1, n)] + ([n] if not pb.pin_goal else [])
    ppos = {k: 3 * i for i, k in enumerate(free_pose)}
    nd = len(pb.free_knots) * pb.n_obstacles
    dpos = {}
    base = 3 * len(free_pose) + n
    for i, k in enumerate(pb.free_knots):
        for j in range(pb.n_obstacles):
            dpos[(int(k), j)] = base + i * pb.n_obstacles + j
    nz = base + nd

    tr_phi = cfg.trust_heading
    tr_delta = cfg.trust_steering
    tr_d = cfg.trust_clearance
    al_cur = augmented_lagrangian(it, pb, check_feasible=False)
    accepted = 0
    stalled = False

    for _ in range(cfg.sqp_inner_iterations):
        if max(tr_phi, tr_delta, tr_d) < _SQP_TRUST_FLOOR:
            stalled = True
            break
        dz = _solve_pose_qp(it, pb, free_pose, ppos, dpos, nz,
                            tr_phi, tr_delta, tr_d)
        cand = it.copy()
        _apply_pose_step(cand, pb, dz, free_pose, ppos, dpos)
        al_new = augmented_lagrangian(cand, pb, check_feasible=False)
        if al_new <= al_cur + _MERIT_SLACK:
            step = float(np.max(np.abs(dz))) if len(dz) else 0.0
            it.states = cand.states
            it.controls = cand.controls
            it.d_pose = cand.d_pose
            it.sin_l = cand.sin_l
            it.cos_l = cand.cos_l
            it.tan_l = cand.tan_l
            al_cur = al_new
            accepted += 1
            if step < _SQP_STEP_FLOOR:
                break
        else:
            tr_phi *= 0.5
            tr_delta *= 0.5
            tr_d *= 0.5
    if stalled and accepted == 0:
        raise SqpStalled("pose trust region below %g with no accepted step"
                         % _SQP_TRUST_FLOOR)
    return {"accepted": accepted, "stalled": stalled}


def _solve_pose_qp(it, pb, free_pose, ppos, dpos, nz, tr_phi, tr_delta, tr_d):
    n = pb.horizon
    p = pb.params
    w = pb.weights
    cfg = pb.config
    rho = it.rho
    x = it.states
    sin_b = np.sin(x[:, 2])
    cos_b = np.cos(x[:, 2])
    tan_b = np.tan(it.controls[:, 0])
    sec2_b = 1.0 + tan_b * tan_b
    delta_base = 3 * len(free_pose)

    rows_i: list[int] = []
    rows_j: list[int] = []
    rows_v: list[float] = []
    wts: list[float] = []
    res: list[float] = []
    row = 0

    def add_row(weight, cols, vals, r):
        nonlocal row
        for cj, vv in zip(cols, vals):
            if cj is not None:
                rows_i.append(row)
                rows_j.append(cj)
                rows_v.append(vv)
        wts.append(weight)
        res.append(r)
        row += 1

    def pose_col(k, comp):
        return ppos[k] + comp if k in ppos else None

    # dynamics penalty rows (position and heading; velocity row constant)
    for k in range(n):
        dt_v = it.dts[k] * x[k, 3]
        rx = float(x[k, 0] + dt_v * cos_b[k] - x[k + 1, 0] + it.eta[k, 0])
        add_row(0.5 * rho,
                [pose_col(k, 0), pose_col(k, 2), pose_col(k + 1, 0)],
                [1.0, -dt_v * sin_b[k], -1.0], rx)
        ry = float(x[k, 1] + dt_v * sin_b[k] - x[k + 1, 1] + it.eta[k, 1])
        add_row(0.5 * rho,
                [pose_col(k, 1), pose_col(k, 2), pose_col(k + 1, 1)],
                [1.0, dt_v * cos_b[k], -1.0], ry)
        rphi = float(x[k, 2] + dt_v * tan_b[k] / p.wheelbase - x[k + 1, 2]
                     + it.eta[k, 2])
        add_row(0.5 * rho,
                [pose_col(k, 2), delta_base + k, pose_col(k + 1, 2)],
                [1.0, dt_v * sec2_b[k] / p.wheelbase, -1.0], rphi)

    # certificate residual rows, plus the majorizer curvature on each
    # clearance step (the linear exponential term lands in q below)
    atl, offset, gtm = _certificate_arrays(it, pb)
    exp_cap = math.exp(cfg.trust_clearance)
    for i, k in enumerate(pb.free_knots):
        k = int(k)
        cx, cy, cphi = pose_col(k, 0), pose_col(k, 1), pose_col(k, 2)
        for j in range(pb.n_obstacles):
            ax, ay = atl[i, j]
            g0 = float(it.d_pose[k, j] + ax * x[k, 0] + ay * x[k, 1]
                       - offset[i, j] + it.zeta[k, j])
            add_row(0.5 * rho, [dpos[(k, j)], cx, cy], [1.0, ax, ay], g0)
            rot_x = cos_b[k] * ax + sin_b[k] * ay
            rot_y = -sin_b[k] * ax + cos_b[k] * ay
            h1 = float(gtm[i, j, 0] + rot_x + it.xi[k, j, 0])
            add_row(0.5 * rho, [cphi], [rot_y], h1)
            h2 = float(gtm[i, j, 1] + rot_y + it.xi[k, j, 1])
            add_row(0.5 * rho, [cphi], [-rot_x], h2)
            if w.w_d:
                curv = w.w_d * math.exp(min(it.d_pose[k, j], 0.0)) * exp_cap
                add_row(0.5 * curv, [dpos[(k, j)]], [1.0], 0.0)

    # tracking, effort, and smoothing terms
    for k in free_pose:
        for comp in range(3):
            add_row(w.w_x, [pose_col(k, comp)], [1.0],
                    float(x[k, comp] - pb.reference[k, comp]))
    for k in range(n):
        add_row(w.w_u, [delta_base + k], [1.0], float(it.controls[k, 0]))
        if w.w_u_rate and pb.u_hat is not None:
            add_row(w.w_u_rate / it.dts[k], [delta_base + k], [1.0],
                    float(it.controls[k, 0] - pb.u_hat[k, 0]))
    if w.w_x_rate:
        for k in range(1, n + 1):
            wk = w.w_x_rate / it.dts[k - 1]
            for comp in range(3):
                add_row(wk, [pose_col(k, comp), pose_col(k - 1, comp)],
                        [1.0, -1.0], float(x[k, comp] - x[k - 1, comp]))

    J = sp.csr_matrix((rows_v, (rows_i, rows_j)), shape=(row, nz))
    wts_arr = np.sqrt(np.asarray(wts))
    Jw = J.multiply(wts_arr[:, None]).tocsr()
    P = 2.0 * (Jw.T @ Jw).tocsc()
    q = 2.0 * (Jw.T @ (wts_arr * np.asarray(res)))
    # linearized exponential clearance: w_d e^{d} (1 + dd)
    for (k, j), col in dpos.items():
        q[col] += w.w_d * math.exp(min(it.d_pose[k, j], 0.0))

    gi, gj, gv, h = [], [], [], []
    grow = 0

    def add_ineq(cols, vals, bound):
        nonlocal grow
        for cj, vv in zip(cols, vals):
            gi.append(grow); gj.append(cj); gv.append(vv)
        h.append(bound)
        grow += 1

    dmin, dmax = float(p.u_min[0]), float(p.u_max[0])
    for k in range(n):
        col = delta_base + k
        d0 = float(it.controls[k, 0])
        add_ineq([col], [1.0], min(dmax - d0, tr_delta))
        add_ineq([col], [-1.0], min(d0 - dmin, tr_delta))
    for k in range(n - 1):
        ca, cb = delta_base + k + 1, delta_base + k
        gap = float(it.controls[k + 1, 0] - it.controls[k, 0])
        add_ineq([ca, cb], [1.0, -1.0], float(p.rate_max[0] * it.dts[k]) - gap)
        add_ineq([ca, cb], [-1.0, 1.0], gap - float(p.rate_min[0] * it.dts[k]))
    for k in free_pose:
        col = pose_col(k, 2)
        add_ineq([col], [1.0], tr_phi)
        add_ineq([col], [-1.0], tr_phi)
    for (k, j), col in dpos.items():
        slack = float(-cfg.eps_clear - it.d_pose[k, j])
        add_ineq([col], [1.0], min(slack, tr_d))
        add_ineq([col], [-1.0], tr_d)

    Gm = sp.csr_matrix((gv, (gi, gj)), shape=(grow, nz)).tocsc()
    z, report = solve_cone_qp(P, q, Gm, np.asarray(h), ConeSpec(nonneg=grow),
                              tol=1e-8)
    if report.status in ("infeasible", "numerical_failure"):
        raise SubproblemFailure("pose")
    return z


def _apply_pose_step(it: PlannerIterate, pb: PlanProblem, dz, free_pose,
                     ppos, dpos) -> None:
    n = pb.horizon
    delta_base = 3 * len(free_pose)
    sin_b = np.sin(it.states[:, 2])
    cos_b = np.cos(it.states[:, 2])
    tan_b = np.tan(it.controls[:, 0])
    sec2_b = 1.0 + tan_b * tan_b
    for k in free_pose:
        off = ppos[k]
        dphi = dz[off + 2]
        it.states[k, 0] += dz[off]
        it.states[k, 1] += dz[off + 1]
        it.states[k, 2] += dphi
        it.sin_l[k] = sin_b[k] + cos_b[k] * dphi
        it.cos_l[k] = cos_b[k] - sin_b[k] * dphi
    for k in range(n):
        dd = dz[delta_base + k]
        it.controls[k, 0] += dd
        it.tan_l[k] = tan_b[k] + sec2_b[k] * dd
    for (k, j), col in dpos.items():
        it.d_pose[k, j] += dz[col]


# ---------------------------------------------------------------------------
# Multiplier ascent and convergence


def update_multipliers(it: PlannerIterate, pb: PlanProblem) -> tuple[float, float]:
    """Ascend the scaled multipliers by the current residuals.

    Returns (primal_sq, dual_sq): the summed squared residuals and the
    summed squared consecutive multiplier differences.  With scaled
    updates the two coincide; both are computed literally.
    """
    defect = dynamics_defect(it.states, it.controls, it.dts, pb.params.wheelbase)
    eta_old = it.eta
    it.eta = it.eta + defect
    primal = float(np.sum(defect ** 2))
    dual = float(np.sum((it.eta - eta_old) ** 2))
    if len(pb.free_knots):
        atl, offset, gtm = _certificate_arrays(it, pb)
        g_res, h_res = _gh_residuals(it, pb, atl, offset, gtm)
        free = pb.free_knots
        zeta_old = it.zeta[free].copy()
        xi_old = it.xi[free].copy()
        it.zeta[free] = it.zeta[free] + g_res
        it.xi[free] = it.xi[free] + h_res
        primal += float(np.sum(g_res ** 2)) + float(np.sum(h_res ** 2))
        dual += float(np.sum((it.zeta[free] - zeta_old) ** 2))
        dual += float(np.sum((it.xi[free] - xi_old) ** 2))
    return primal, dual


def adapt_penalty(it: PlannerIterate, history: list, rho_max: float,
                  factor: float = 2.0) -> bool:
    """Penalty continuation: double rho when the primal residual stalls.

    The stiff modes of the coupled trajectory (whole-path shifts) make
    the multiplier ascent contract at roughly kappa/(kappa + rho eig),
    so a residual decaying by less than a fixed factor over a trailing
    window means rho is too small for those modes.  Scaled multipliers
    shrink by the same factor, which preserves the implied duals.
    Returns True when rho changed.
    """
    if len(history) <= _RHO_WINDOW:
        return False
    if it.rho * factor > rho_max:
        return False
    if history[-1] <= _RHO_STALL_FACTOR * history[-1 - _RHO_WINDOW]:
        return False
    it.rho *= factor
    it.eta /= factor
    it.zeta /= factor
    it.xi /= factor
    return True


def check_convergence(cfg: SolverConfig, primal_sq: float, dual_sq: float) -> bool:
    return primal_sq <= cfg.eps_pri and dual_sq <= cfg.eps_dual


# ---------------------------------------------------------------------------
# Top-level solve


def _warm_start(scenario: Scenario, start: Pose, cfg: SolverConfig):
    obstacles = scenario.all_obstacles()
    params = scenario.vehicle
    checker = CollisionChecker(obstacles, params.shape, scenario.bounds,
                               margin=cfg.safety_margin)
    grid = GridConfig(bounds=scenario.bounds, safety_margin=cfg.safety_margin)
    try:
        coarse = plan_coarse(start, scenario.goal, obstacles, params, grid, checker)
        return assign_speed_profile(
            coarse, params, cfg.v_cruise, n_steps=cfg.horizon,
            t_min=cfg.t_min, t_max=cfg.t_max, goal_heading=scenario.goal.heading,
        )
    except (NoPathFound, StartInCollision, GoalInCollision, InfeasibleProfile) as exc:
        raise WarmStartFailed(str(exc)) from exc


def _clamp_controls(controls: np.ndarray, dts: np.ndarray, params) -> np.ndarray:
    """Project warm-start controls into the box and rate limits in place
    of trusting the profile, which may overshoot steering at sharp
    chords; a forward pass keeps consecutive steps rate-feasible."""
    out = np.clip(controls, params.u_min, params.u_max)
    for k in range(1, len(out)):
        lo = out[k - 1] + params.rate_min * dts[k - 1]
        hi = out[k - 1] + params.rate_max * dts[k - 1]
        out[k] = np.clip(out[k], np.maximum(lo, params.u_min),
                         np.minimum(hi, params.u_max))
    return out


def build_problem(scenario: Scenario, start: Pose | None = None,
                  executor: ThreadPoolExecutor | None = None):
    """Warm start the scenario and assemble (problem, iterate)."""
    cfg = scenario.solver
    start = start or scenario.start
    ws = _warm_start(scenario, start, cfg)
    n = cfg.horizon
    free = np.arange(1, n) if cfg.pin_goal else np.arange(1, n + 1)
    pb = PlanProblem(
        params=scenario.vehicle,
        weights=scenario.weights,
        config=cfg,
        obstacles=scenario.all_obstacles(),
        reference=ws.states.copy(),
        free_knots=free,
        pin_goal=cfg.pin_goal,
        executor=executor,
    )
    controls = _clamp_controls(ws.controls.copy(), ws.dts, scenario.vehicle)
    it = make_iterate(pb, ws.states, controls, ws.dts, ws.gear)
    # the chord ladder may open with a slightly rotated heading; the
    # endpoints are hard boundary conditions, so pin them exactly and
    # let the defect penalty absorb the first-step mismatch
    it.states[0] = (start.x, start.y, start.heading, 0.0)
    if cfg.pin_goal:
        it.states[n] = (scenario.goal.x, scenario.goal.y,
                        scenario.goal.heading, 0.0)
    it.sin_l = np.sin(it.states[:, 2])
    it.cos_l = np.cos(it.states[:, 2])
    if cfg.warmstart_duals:
        seeds = warmstart_duals_qp(
            [Pose(*row) for row in ws.states[free, :3]],
            pb.obstacles, scenario.vehicle.shape, scenario.weights.beta,
            eps_clear=cfg.eps_clear,
        )
        for i, k in enumerate(free):
            for j in range(pb.n_obstacles):
                it.duals[k][j] = seeds[i][j]
    return pb, it


def _knot_clearances(it: PlannerIterate, pb: PlanProblem) -> np.ndarray:
    """Certified clearance floor per knot; exact geometry at pinned knots."""
    n = pb.horizon
    out = np.empty(n + 1)
    free = set(int(k) for k in pb.free_knots) if pb.n_obstacles else set()
    for k in range(n + 1):
        if k in free:
            out[k] = -float(it.d_pose[k].max())
        else:
            pose = Pose(*it.states[k, :3])
            foot = place_footprint(pb.params.shape, pose)
            out[k] = min(
                (signed_distance(foot, o) for o in pb.obstacles),
                default=math.inf,
            )
    return out


def _build_trajectory(it: PlannerIterate, pb: PlanProblem,
                      report: SolveReport) -> PlannedTrajectory:
    return PlannedTrajectory(
        states=it.states.copy(),
        controls=it.controls.copy(),
        dts=it.dts.copy(),
        clearances=_knot_clearances(it, pb),
        gear=it.gear.copy(),
        report=report,
    )


def plan(scenario: Scenario, start: Pose | None = None) -> PlannedTrajectory:
    """Full pipeline: warm start, block iterations, feasibility gate.

    Convergence requires both residual sums at tolerance and the shared
    trajectory verifier to pass; iterations continue past the residual
    test if the verifier still rejects.  Raises WarmStartFailed,
    SubproblemFailure, or MaxIterationsReached (the latter carrying the
    best iterate and its diagnostics).
    """
    cfg = scenario.solver
    t_start = time.perf_counter()
    executor = None
    try:
        if cfg.parallelism > 1:
            executor = ThreadPoolExecutor(max_workers=cfg.parallelism)
        pb, it = build_problem(scenario, start, executor)
        warm_time = time.perf_counter() - t_start

        block_times = {"certificates": 0.0, "controls": 0.0, "time_steps": 0.0,
                       "pose": 0.0, "multipliers": 0.0}
        trace: list[IterationRecord] = []
        warnings: list[str] = []
        best = None
        converged = False
        primal_sq = dual_sq = math.inf
        primal_history: list[float] = []

        for outer in range(1, cfg.max_outer_iterations + 1):
            t0 = time.perf_counter()
            update_certificates(it, pb)
            t1 = time.perf_counter()
            update_controls(it, pb)
            t2 = time.perf_counter()
            update_time_steps(it, pb)
            t3 = time.perf_counter()
            stalled = False
            try:
                info = update_pose_block(it, pb)
                stalled = info["stalled"]
            except SqpStalled as exc:
                warnings.append("iteration %d: %s" % (outer, exc))
                stalled = True
            t4 = time.perf_counter()
            primal_sq, dual_sq = update_multipliers(it, pb)
            t5 = time.perf_counter()
            primal_history.append(primal_sq)
            if cfg.adapt_rho:
                if adapt_penalty(it, primal_history, cfg.rho_max):
                    primal_history.clear()

            block_times["certificates"] += t1 - t0
            block_times["controls"] += t2 - t1
            block_times["time_steps"] += t3 - t2
            block_times["pose"] += t4 - t3
            block_times["multipliers"] += t5 - t4
            obj = objective_value(it.states, it.controls, it.dts, pb.reference,
                                  pb.weights, d_values=it.d_pose[pb.free_knots],
                                  u_hat=pb.u_hat)
            trace.append(IterationRecord(
                index=outer, primal_sq=primal_sq, dual_sq=dual_sq,
                objective=obj,
                augmented_lagrangian=augmented_lagrangian(it, pb, check_feasible=False),
                rho=it.rho,
                block_times={"certificates": t1 - t0, "controls": t2 - t1,
                             "time_steps": t3 - t2, "pose": t4 - t3,
                             "multipliers": t5 - t4},
                sqp_stalled=stalled,
            ))
            if best is None or primal_sq < best[0]:
                best = (primal_sq, dual_sq, it.copy())
            if check_convergence(cfg, primal_sq, dual_sq):
                rep = verify_trajectory(
                    it.states, it.controls, it.dts, pb.params, pb.obstacles,
                    cfg.t_min, cfg.t_max,
                )
                if rep.ok:
                    converged = True
                    break
                if outer == cfg.max_outer_iterations:
                    warnings.append("residuals converged but verifier rejected: "
                                    + "; ".join(rep.violations))

        solve_time = time.perf_counter() - t_start
        report = SolveReport(
            converged=converged,
            iterations=len(trace),
            primal_sq=primal_sq,
            dual_sq=dual_sq,
            objective=trace[-1].objective if trace else math.nan,
            solve_time=solve_time,
            warm_start_time=warm_time,
            block_times=block_times,
            trace=trace,
            warnings=warnings,
        )
        if converged:
            return _build_trajectory(it, pb, report)
        b_primal, b_dual, b_it = best
        report.primal_sq = b_primal
        report.dual_sq = b_dual
        raise MaxIterationsReached(_build_trajectory(b_it, pb, report),
                                   b_primal, b_dual)
    finally:
        if executor is not None:
            executor.shutdown(wait=False)
