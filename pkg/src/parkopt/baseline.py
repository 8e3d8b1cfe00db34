"""Centralized comparison solver and a tiny-horizon enumeration oracle.

solve_centralized stacks every decision variable of the trajectory
problem (free state knots, controls, time steps, and the per-pair
separation certificates lam, mu, d) into one vector and solves the
whole nonlinear program at once by penalty SQP: Gauss-Newton steps on
an augmented-Lagrangian merit with a rising penalty weight, each step
one sparse cone QP.  It consumes the same warm start, objective, and
feasibility conventions as the splitting planner in admm, so cross-arm
comparisons isolate solver behavior rather than modeling differences.

brute_force_tiny enumerates a coarse control-and-time grid for
horizons of at most three steps and returns the best collision-free
grid point.  It exists as an independent optimum oracle: no
linearization, no certificates, exact clearances from geometry.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import admm
from .admm import MaxIterationsReached, PlanProblem, PlannerIterate, objective_value
from .conic import ConeSpec, solve_cone_qp
from .dual_collision import DualState, warmstart_duals_qp
from .geometry import Pose
from .scenario import Scenario
from .trajectory import IterationRecord, PlannedTrajectory, SolveReport
from .vehicle import dynamics_defect, rollout_array

_SIGMA0 = 10.0
_SIGMA_GROW = 10.0
_SIGMA_MAX = 1e7
_VIOL_DROP = 0.25
_VIOL_TOL = 1e-4
_STEP_TOL = 1e-5
_STAGE_ITERS = 8
_MAX_STAGES = 25
_ARMIJO = 1e-4
_LS_MAX_HALVINGS = 30
_QP_TOL = 1e-7
_GRID_CAP = 15
_OVERLAP = -1.0


class LineSearchFailure(RuntimeError):
    """No acceptable merit decrease along the computed SQP step."""


class NoFeasibleGridPoint(RuntimeError):
    """Every grid combination violated dynamics limits or clearance."""


@dataclass
class CentralizedProblem:
    """Stacked-variable view of the full trajectory problem.

    state_idx maps (knot, component) to a position in the flat vector z
    with -1 marking boundary-pinned entries whose values live in
    fixed_states; controls and time steps follow contiguously, then one
    (lam, mu, d) block per (free knot, obstacle) pair.  The equality
    residual vector is tagged by origin in constraint_tags
    ("dynamics", "clearance", "rotation").
    """

    pb: PlanProblem
    fixed_states: np.ndarray
    gear: np.ndarray
    state_idx: np.ndarray
    u_off: int
    t_off: int
    lam_idx: list
    mu_idx: list
    d_idx: list
    nz: int
    n_eq: int
    constraint_tags: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.pb.horizon

    @property
    def n_pairs(self) -> int:
        return len(self.pb.free_knots) * self.pb.n_obstacles


def build_centralized(pb: PlanProblem, it: PlannerIterate) -> CentralizedProblem:
    """Index map for stacking the iterate into one vector."""
    n = pb.horizon
    state_idx = np.full((n + 1, 4), -1, dtype=int)
    nxt = 0
    for k in pb.free_knots:
        for c in range(4):
            state_idx[k, c] = nxt
            nxt += 1
    u_off = nxt
    nxt += 2 * n
    t_off = nxt
    nxt += n
    lam_idx: list = []
    mu_idx: list = []
    d_idx: list = []
    for _ in pb.free_knots:
        li, mi, di = [], [], []
        for obs in pb.obstacles:
            nf = len(obs.b)
            li.append(np.arange(nxt, nxt + nf))
            nxt += nf
            mi.append(np.arange(nxt, nxt + 4))
            nxt += 4
            di.append(nxt)
            nxt += 1
        lam_idx.append(li)
        mu_idx.append(mi)
        d_idx.append(di)
    npairs = len(pb.free_knots) * pb.n_obstacles
    tags = {
        "dynamics": slice(0, 4 * n),
        "clearance": slice(4 * n, 4 * n + npairs),
        "rotation": slice(4 * n + npairs, 4 * n + 3 * npairs),
    }
    return CentralizedProblem(
        pb=pb,
        fixed_states=it.states.copy(),
        gear=it.gear.copy(),
        state_idx=state_idx,
        u_off=u_off,
        t_off=t_off,
        lam_idx=lam_idx,
        mu_idx=mu_idx,
        d_idx=d_idx,
        nz=nxt,
        n_eq=4 * n + 3 * npairs,
        constraint_tags=tags,
    )


def _pack(cp: CentralizedProblem, it: PlannerIterate) -> np.ndarray:
    z = np.empty(cp.nz)
    mask = cp.state_idx >= 0
    z[cp.state_idx[mask]] = it.states[mask]
    n = cp.horizon
    z[cp.u_off : cp.u_off + 2 * n] = it.controls.ravel()
    z[cp.t_off : cp.t_off + n] = it.dts
    for i, k in enumerate(cp.pb.free_knots):
        for j in range(cp.pb.n_obstacles):
            dual = it.duals[k][j]
            z[cp.lam_idx[i][j]] = dual.lam
            z[cp.mu_idx[i][j]] = dual.mu
            z[cp.d_idx[i][j]] = it.d_pose[k, j]
    return z


def _unpack_into(cp: CentralizedProblem, z: np.ndarray, it: PlannerIterate) -> None:
    it.states[:] = _state_matrix(cp, z)
    n = cp.horizon
    it.controls[:] = z[cp.u_off : cp.u_off + 2 * n].reshape(n, 2)
    it.dts[:] = z[cp.t_off : cp.t_off + n]
    for i, k in enumerate(cp.pb.free_knots):
        for j in range(cp.pb.n_obstacles):
            d = float(z[cp.d_idx[i][j]])
            it.duals[k][j] = DualState(
                z[cp.lam_idx[i][j]].copy(), z[cp.mu_idx[i][j]].copy(), d
            )
            it.d_pose[k, j] = d
    it.sin_l = np.sin(it.states[:, 2])
    it.cos_l = np.cos(it.states[:, 2])
    it.tan_l = np.tan(it.controls[:, 0])


def _state_matrix(cp: CentralizedProblem, z: np.ndarray) -> np.ndarray:
    x = cp.fixed_states.copy()
    mask = cp.state_idx >= 0
    x[mask] = z[cp.state_idx[mask]]
    return x


def _equality_residuals(cp: CentralizedProblem, z: np.ndarray) -> np.ndarray:
    """Stacked equality defects, ordered as constraint_tags."""
    pb = cp.pb
    n = cp.horizon
    x = _state_matrix(cp, z)
    u = z[cp.u_off : cp.u_off + 2 * n].reshape(n, 2)
    t = z[cp.t_off : cp.t_off + n]
    c = np.empty(cp.n_eq)
    c[: 4 * n] = dynamics_defect(x, u, t, pb.params.wheelbase).ravel()
    npairs = cp.n_pairs
    gview = c[4 * n : 4 * n + npairs]
    hview = c[4 * n + npairs :]
    shape = pb.params.shape
    r = 0
    for i, k in enumerate(pb.free_knots):
        px, py, heading = x[k, :3]
        ch, sh = math.cos(heading), math.sin(heading)
        for j, obs in enumerate(pb.obstacles):
            lam = z[cp.lam_idx[i][j]]
            mu = z[cp.mu_idx[i][j]]
            d = z[cp.d_idx[i][j]]
            w = obs.A.T @ lam
            gview[r] = d + w[0] * px + w[1] * py - lam @ obs.b - mu @ shape.g
            gtm = mu @ shape.G
            hview[2 * r] = gtm[0] + ch * w[0] + sh * w[1]
            hview[2 * r + 1] = gtm[1] - sh * w[0] + ch * w[1]
            r += 1
    return c


def _equality_jacobian(cp: CentralizedProblem, z: np.ndarray) -> sp.csr_matrix:
    pb = cp.pb
    n = cp.horizon
    L = pb.params.wheelbase
    x = _state_matrix(cp, z)
    u = z[cp.u_off : cp.u_off + 2 * n].reshape(n, 2)
    t = z[cp.t_off : cp.t_off + n]
    si = cp.state_idx
    rows: list = []
    cols: list = []
    vals: list = []

    def put(r, c, v):
        if c >= 0:
            rows.append(r)
            cols.append(c)
            vals.append(v)

    for k in range(n):
        ch, sh = math.cos(x[k, 2]), math.sin(x[k, 2])
        tan_d = math.tan(u[k, 0])
        sec2 = 1.0 + tan_d * tan_d
        v = x[k, 3]
        dt = t[k]
        base = 4 * k
        ud, ua = cp.u_off + 2 * k, cp.u_off + 2 * k + 1
        tk = cp.t_off + k
        put(base, si[k, 0], 1.0)
        put(base, si[k, 2], -v * dt * sh)
        put(base, si[k, 3], dt * ch)
        put(base, tk, v * ch)
        put(base, si[k + 1, 0], -1.0)
        put(base + 1, si[k, 1], 1.0)
        put(base + 1, si[k, 2], v * dt * ch)
        put(base + 1, si[k, 3], dt * sh)
        put(base + 1, tk, v * sh)
        put(base + 1, si[k + 1, 1], -1.0)
        put(base + 2, si[k, 2], 1.0)
        put(base + 2, si[k, 3], dt * tan_d / L)
        put(base + 2, ud, v * dt * sec2 / L)
        put(base + 2, tk, v * tan_d / L)
        put(base + 2, si[k + 1, 2], -1.0)
        put(base + 3, si[k, 3], 1.0)
        put(base + 3, ua, dt)
        put(base + 3, tk, u[k, 1])
        put(base + 3, si[k + 1, 3], -1.0)

    shape = pb.params.shape
    npairs = cp.n_pairs
    g_base = 4 * n
    h_base = 4 * n + npairs
    r = 0
    for i, k in enumerate(pb.free_knots):
        px, py, heading = x[k, :3]
        ch, sh = math.cos(heading), math.sin(heading)
        for j, obs in enumerate(pb.obstacles):
            lam = z[cp.lam_idx[i][j]]
            w = obs.A.T @ lam
            gr = g_base + r
            put(gr, cp.d_idx[i][j], 1.0)
            put(gr, si[k, 0], w[0])
            put(gr, si[k, 1], w[1])
            resid = obs.A @ np.array([px, py]) - obs.b
            for f, li in enumerate(cp.lam_idx[i][j]):
                put(gr, li, resid[f])
            for e, mi in enumerate(cp.mu_idx[i][j]):
                put(gr, mi, -shape.g[e])
            h1, h2 = h_base + 2 * r, h_base + 2 * r + 1
            put(h1, si[k, 2], -sh * w[0] + ch * w[1])
            put(h2, si[k, 2], -ch * w[0] - sh * w[1])
            for f, li in enumerate(cp.lam_idx[i][j]):
                put(h1, li, ch * obs.A[f, 0] + sh * obs.A[f, 1])
                put(h2, li, -sh * obs.A[f, 0] + ch * obs.A[f, 1])
            for e, mi in enumerate(cp.mu_idx[i][j]):
                put(h1, mi, shape.G[e, 0])
                put(h2, mi, shape.G[e, 1])
            r += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(cp.n_eq, cp.nz))


def _objective(cp: CentralizedProblem, z: np.ndarray) -> float:
    pb = cp.pb
    n = cp.horizon
    x = _state_matrix(cp, z)
    u = z[cp.u_off : cp.u_off + 2 * n].reshape(n, 2)
    t = z[cp.t_off : cp.t_off + n]
    ds = [z[cp.d_idx[i][j]] for i in range(len(pb.free_knots))
          for j in range(pb.n_obstacles)]
    return objective_value(x, u, t, pb.reference, pb.weights,
                           d_values=ds, u_hat=pb.u_hat)


def _objective_model(cp: CentralizedProblem, z: np.ndarray):
    """Value, gradient, and a PSD curvature model of the objective.

    Quadratic terms are exact; the 1/dt rate couplings keep their exact
    gradient but freeze dt inside the curvature (plus the exact
    positive dt-diagonal), and exp(d) contributes its own curvature.
    """
    pb = cp.pb
    w = pb.weights
    n = cp.horizon
    x = _state_matrix(cp, z)
    u = z[cp.u_off : cp.u_off + 2 * n].reshape(n, 2)
    t = z[cp.t_off : cp.t_off + n]
    si = cp.state_idx
    g = np.zeros(cp.nz)
    hr: list = []
    hc: list = []
    hv: list = []

    def hess(a, b, v):
        hr.append(a)
        hc.append(b)
        hv.append(v)

    ref = np.asarray(pb.reference)
    mask = si >= 0
    idx = si[mask]
    g[idx] += 2.0 * w.w_x * (x[mask] - ref[mask])
    for q in idx:
        hess(q, q, 2.0 * w.w_x)
    for k in range(n):
        for c in range(2):
            q = cp.u_off + 2 * k + c
            g[q] += 2.0 * w.w_u * u[k, c]
            hess(q, q, 2.0 * w.w_u)
    if w.w_x_rate:
        for k in range(n):
            tk = t[k]
            tq = cp.t_off + k
            ssq = 0.0
            for c in range(4):
                r = x[k + 1, c] - x[k, c]
                ssq += r * r
                cw = 2.0 * w.w_x_rate / tk
                a, b = si[k, c], si[k + 1, c]
                if b >= 0:
                    g[b] += cw * r
                    hess(b, b, cw)
                if a >= 0:
                    g[a] -= cw * r
                    hess(a, a, cw)
                if a >= 0 and b >= 0:
                    hess(a, b, -cw)
                    hess(b, a, -cw)
            g[tq] -= w.w_x_rate * ssq / (tk * tk)
            hess(tq, tq, 2.0 * w.w_x_rate * ssq / (tk * tk * tk))
    if w.w_u_rate and pb.u_hat is not None:
        uh = np.asarray(pb.u_hat)
        for k in range(n):
            tk = t[k]
            tq = cp.t_off + k
            ssq = 0.0
            for c in range(2):
                r = u[k, c] - uh[k, c]
                ssq += r * r
                q = cp.u_off + 2 * k + c
                cw = 2.0 * w.w_u_rate / tk
                g[q] += cw * r
                hess(q, q, cw)
            g[tq] -= w.w_u_rate * ssq / (tk * tk)
            hess(tq, tq, 2.0 * w.w_u_rate * ssq / (tk * tk * tk))
    if w.w_d:
        for i in range(len(pb.free_knots)):
            for j in range(pb.n_obstacles):
                q = cp.d_idx[i][j]
                ed = w.w_d * math.exp(z[q])
                g[q] += ed
                hess(q, q, ed)
    H = sp.csr_matrix((hv, (hr, hc)), shape=(cp.nz, cp.nz))
    return _objective(cp, z), g, H


def _inequality_rows(cp: CentralizedProblem):
    """Static inequality structure G z <= h plus trust rows and cones.

    Returns (G, h, n_trust, trust_h, cone).  G and h cover the rows
    linear in z (boxes, rates, gear signs, certificate signs, clearance
    caps, and the per-pair second-order cones last); trust rows bound
    the SQP step itself and slot in just before the cones.
    """
    pb = cp.pb
    p = pb.params
    cfg = pb.config
    n = cp.horizon
    gi: list = []
    gj: list = []
    gv: list = []
    h: list = []
    row = 0

    def add(cols, vals, bound):
        nonlocal row
        for c, v in zip(cols, vals):
            gi.append(row)
            gj.append(c)
            gv.append(v)
        h.append(bound)
        row += 1

    for k in range(n):
        for c in range(2):
            q = cp.u_off + 2 * k + c
            add([q], [1.0], float(p.u_max[c]))
            add([q], [-1.0], float(-p.u_min[c]))
    for k in range(n - 1):
        tk = cp.t_off + k
        for c in range(2):
            a, b = cp.u_off + 2 * k + c, cp.u_off + 2 * (k + 1) + c
            add([b, a, tk], [1.0, -1.0, -float(p.rate_max[c])], 0.0)
            add([b, a, tk], [-1.0, 1.0, float(p.rate_min[c])], 0.0)
    for k in range(n):
        tk = cp.t_off + k
        add([tk], [1.0], cfg.t_max)
        add([tk], [-1.0], -cfg.t_min)
    for k in range(1, n):
        vq = cp.state_idx[k, 3]
        if vq < 0:
            continue
        if cp.gear[k] != 0:
            add([vq], [-float(cp.gear[k])], 0.0)
        else:
            add([vq], [1.0], 0.0)
            add([vq], [-1.0], 0.0)
    for i in range(len(pb.free_knots)):
        for j in range(pb.n_obstacles):
            for q in cp.lam_idx[i][j]:
                add([q], [-1.0], 0.0)
            for q in cp.mu_idx[i][j]:
                add([q], [-1.0], 0.0)
            add([cp.d_idx[i][j]], [1.0], -cfg.eps_clear)

    n_lin = row
    trust_h: list = []
    for k in pb.free_knots:
        q = cp.state_idx[k, 2]
        add([q], [1.0], cfg.trust_heading)
        add([q], [-1.0], cfg.trust_heading)
        trust_h += [cfg.trust_heading, cfg.trust_heading]
    for k in range(n):
        q = cp.u_off + 2 * k
        add([q], [1.0], cfg.trust_steering)
        add([q], [-1.0], cfg.trust_steering)
        trust_h += [cfg.trust_steering, cfg.trust_steering]
    for i in range(len(pb.free_knots)):
        for j in range(pb.n_obstacles):
            q = cp.d_idx[i][j]
            add([q], [1.0], cfg.trust_clearance)
            add([q], [-1.0], cfg.trust_clearance)
            trust_h += [cfg.trust_clearance, cfg.trust_clearance]
    n_trust = row - n_lin

    soc_sizes = []
    for i in range(len(pb.free_knots)):
        for j, obs in enumerate(pb.obstacles):
            add([], [], 1.0)
            li = cp.lam_idx[i][j]
            add(list(li), list(-obs.A[:, 0]), 0.0)
            add(list(li), list(-obs.A[:, 1]), 0.0)
            soc_sizes.append(3)

    G = sp.csr_matrix((gv, (gi, gj)), shape=(row, cp.nz))
    cone = ConeSpec(nonneg=n_lin + n_trust, soc=tuple(soc_sizes))
    return G, np.asarray(h), n_lin, np.asarray(trust_h), cone


def _seed_duals(pb: PlanProblem, it: PlannerIterate) -> None:
    """Certificate warm start from the clearance QP, synced into d_pose."""
    free = pb.free_knots
    seeds = warmstart_duals_qp(
        [Pose(*row) for row in it.states[free, :3]],
        pb.obstacles, pb.params.shape, pb.weights.beta,
        eps_clear=pb.config.eps_clear,
    )
    for i, k in enumerate(free):
        for j in range(pb.n_obstacles):
            it.duals[k][j] = seeds[i][j]
            it.d_pose[k, j] = min(seeds[i][j].d, -pb.config.eps_clear)


def solve_centralized(
    scenario: Scenario,
    start: Pose | None = None,
    dual_init: bool | None = None,
    max_iterations: int = 120,
) -> PlannedTrajectory:
    """One-shot penalty-SQP solve of the full trajectory problem.

    dual_init True seeds the certificates from the clearance warm-start
    QP, False leaves them at zero, None defers to the scenario's
    warmstart_duals flag.  Raises LineSearchFailure when no step
    decreases the merit (including a failed QP subproblem) and
    MaxIterationsReached, carrying the best iterate, when the violation
    target is still unmet after the iteration budget.

    Trace records map onto the splitting planner's format: primal_sq is
    the squared equality violation, dual_sq the squared step length,
    and rho the penalty weight.
    """
    t0 = time.perf_counter()
    pb, it = admm.build_problem(scenario, start)
    warm_time = time.perf_counter() - t0
    if dual_init is True and not pb.config.warmstart_duals:
        _seed_duals(pb, it)
    elif dual_init is False and pb.config.warmstart_duals:
        for k in pb.free_knots:
            for j, obs in enumerate(pb.obstacles):
                it.duals[k][j] = DualState.zeros(len(obs.b), -pb.config.eps_clear)
                it.d_pose[k, j] = -pb.config.eps_clear

    cp = build_centralized(pb, it)
    z = _pack(cp, it)
    G, h, n_lin, trust_h, cone = _inequality_rows(cp)
    n_trust = len(trust_h)
    y = np.zeros(cp.n_eq)
    sigma = _SIGMA0
    trace: list = []
    qp_time = 0.0
    qp_count = 0
    step_sq = math.inf
    best_viol = math.inf
    best_z = z.copy()
    converged = False
    viol_prev = math.inf
    reg = 1e-10 * sp.eye(cp.nz, format="csr")

    for _stage in range(_MAX_STAGES):
        stationary = False
        for _inner in range(_STAGE_ITERS):
            c = _equality_residuals(cp, z)
            viol = float(np.max(np.abs(c))) if len(c) else 0.0
            if viol < best_viol:
                best_viol = viol
                best_z = z.copy()
            if qp_count >= max_iterations:
                break
            J = _equality_jacobian(cp, z)
            f, g, H = _objective_model(cp, z)
            shifted = y + sigma * c
            q = g + J.T @ shifted
            P = (H + sigma * (J.T @ J) + reg).tocsr()
            slack = h - G @ z
            slack[n_lin : n_lin + n_trust] = trust_h
            tq = time.perf_counter()
            step, rep = solve_cone_qp(P, q, G, slack, cone, tol=_QP_TOL)
            qp_time += time.perf_counter() - tq
            qp_count += 1
            if rep.status not in ("optimal", "max_iter"):
                raise LineSearchFailure(
                    "cone QP %s at penalty weight %g" % (rep.status, sigma)
                )
            step_inf = float(np.max(np.abs(step)))
            step_sq = float(step @ step)
            merit = f + float(y @ c) + 0.5 * sigma * float(c @ c)
            trace.append(IterationRecord(
                index=qp_count, primal_sq=float(c @ c), dual_sq=step_sq,
                objective=f, augmented_lagrangian=merit, rho=sigma,
                block_times={"qp": qp_time},
            ))
            if step_inf <= _STEP_TOL:
                stationary = True
                break
            descent = float(q @ step)
            if descent >= -1e-16:
                stationary = True
                break
            alpha = 1.0
            for _ in range(_LS_MAX_HALVINGS):
                z_try = z + alpha * step
                c_try = _equality_residuals(cp, z_try)
                m_try = (_objective(cp, z_try) + float(y @ c_try)
                         + 0.5 * sigma * float(c_try @ c_try))
                if m_try <= merit + _ARMIJO * alpha * descent:
                    break
                alpha *= 0.5
            else:
                raise LineSearchFailure(
                    "no merit decrease at penalty weight %g" % sigma
                )
            z = z_try
        c = _equality_residuals(cp, z)
        viol = float(np.max(np.abs(c))) if len(c) else 0.0
        if viol < best_viol:
            best_viol = viol
            best_z = z.copy()
        if viol <= _VIOL_TOL and stationary:
            converged = True
            break
        if qp_count >= max_iterations:
            break
        y = y + sigma * c
        if viol > _VIOL_DROP * viol_prev and sigma < _SIGMA_MAX:
            sigma *= _SIGMA_GROW
            sigma = min(sigma, _SIGMA_MAX)
        viol_prev = viol

    z_fin = z if converged else best_z
    _unpack_into(cp, z_fin, it)
    c = _equality_residuals(cp, z_fin)
    report = SolveReport(
        converged=converged,
        iterations=qp_count,
        primal_sq=float(c @ c),
        dual_sq=step_sq,
        objective=_objective(cp, z_fin),
        solve_time=time.perf_counter() - t0,
        warm_start_time=warm_time,
        block_times={"qp": qp_time},
        trace=trace,
    )
    traj = admm._build_trajectory(it, pb, report)
    if not converged:
        raise MaxIterationsReached(traj, report.primal_sq, step_sq)
    return traj


# ---------------------------------------------------------------------------
# Tiny-horizon brute force


def _batch_clearance(states: np.ndarray, shape, obstacle) -> np.ndarray:
    """Exact footprint-to-polytope distance for B poses at once.

    Returns the separation distance where the footprint and obstacle
    are disjoint and -1.0 where they overlap (callers prune those, so
    no penetration depth is needed).  Matches geometry.signed_distance
    on disjoint poses: for convex polygons the closest points lie on a
    vertex-edge feature checked from both sides.
    """
    states = np.asarray(states, dtype=float)
    B = states.shape[0]
    ch = np.cos(states[:, 2])
    sh = np.sin(states[:, 2])
    local = shape.body_polytope().vertices
    rot = np.empty((B, 2, 2))
    rot[:, 0, 0] = ch
    rot[:, 0, 1] = -sh
    rot[:, 1, 0] = sh
    rot[:, 1, 1] = ch
    corners = np.einsum("vj,bij->bvi", local, rot) + states[:, None, :2]
    overts = obstacle.vertices

    # separating-axis test over both polygons' edge normals
    proj_c = np.einsum("bvi,fi->bvf", corners, obstacle.A)
    gap1 = proj_c.min(axis=1) - obstacle.b[None, :]
    sep = gap1.max(axis=1) > 0.0
    axes = np.einsum("fj,bij->bfi", shape.G, rot)
    off = np.einsum("bfi,bi->bf", axes, states[:, :2])
    proj_o = np.einsum("vi,bfi->bvf", overts, axes)
    gap2 = proj_o.min(axis=1) - (shape.g[None, :] + off)
    sep |= gap2.max(axis=1) > 0.0

    starts = overts
    ends = np.roll(overts, -1, axis=0)
    dmin = _points_to_segments(corners, starts[None], ends[None])
    cstarts = corners
    cends = np.roll(corners, -1, axis=1)
    dmin = np.minimum(dmin, _points_to_segments(
        np.broadcast_to(overts[None], (B, len(overts), 2)), cstarts, cends))
    return np.where(sep, dmin, _OVERLAP)


def _points_to_segments(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min distance from each batch's points to its segments, (B,)."""
    d = b - a
    denom = np.einsum("bsi,bsi->bs", d, d)
    denom = np.where(denom < 1e-30, 1.0, denom)
    rel = pts[:, :, None, :] - a[:, None, :, :]
    tt = np.einsum("bpsi,bsi->bps", rel, d) / denom[:, None, :]
    tt = np.clip(tt, 0.0, 1.0)
    closest = a[:, None, :, :] + tt[..., None] * d[:, None, :, :]
    diff = pts[:, :, None, :] - closest
    dist = np.hypot(diff[..., 0], diff[..., 1])
    return dist.min(axis=(1, 2))


def grid_objective(pb: PlanProblem, states, controls, dts) -> float:
    """Trajectory cost with exact geometric clearances as the floors.

    Shared yardstick for comparing solver output against enumeration:
    every free knot contributes exp(-distance) per obstacle, with
    distances from geometry rather than certificates.
    """
    states = np.asarray(states, dtype=float)
    ds: list = []
    for obs in pb.obstacles:
        sd = _batch_clearance(states[pb.free_knots], pb.params.shape, obs)
        ds.extend(-sd)
    return objective_value(states, controls, dts, pb.reference, pb.weights,
                           d_values=ds, u_hat=pb.u_hat)


def brute_force_tiny(
    scenario: Scenario,
    start: Pose | None = None,
    points_per_dim: int = 7,
    time_points: int = 3,
) -> PlannedTrajectory:
    """Exhaustive grid search over controls and step durations, N <= 3.

    Enumerates every (steering, accel, dt) combination per step on a
    uniform grid, rolls out the kinematics exactly, prunes rate, gear,
    and clearance violations, and returns the feasible leaf minimizing
    the exact-clearance objective (grid_objective).  Raises
    NoFeasibleGridPoint when nothing survives.
    """
    cfg = scenario.solver
    n = cfg.horizon
    if n > 3:
        raise ValueError("brute force requires horizon <= 3, got %d" % n)
    if not 2 <= points_per_dim <= _GRID_CAP:
        raise ValueError("points_per_dim must be in [2, %d]" % _GRID_CAP)
    if not 2 <= time_points <= _GRID_CAP:
        raise ValueError("time_points must be in [2, %d]" % _GRID_CAP)
    t0 = time.perf_counter()
    pb, it = admm.build_problem(scenario, start)
    p = pb.params
    w = pb.weights
    free = set(int(k) for k in pb.free_knots)

    deltas = np.linspace(p.u_min[0], p.u_max[0], points_per_dim)
    accels = np.linspace(p.u_min[1], p.u_max[1], points_per_dim)
    tgrid = np.linspace(cfg.t_min, cfg.t_max, time_points)
    dd, aa, tt = np.meshgrid(deltas, accels, tgrid, indexing="ij")
    opts = np.column_stack([dd.ravel(), aa.ravel(), tt.ravel()])
    n_opts = len(opts)

    # depth-first expansion with full vectorization across candidates
    states = it.states[0][None, :].copy()
    plan_u = np.empty((1, 0, 2))
    plan_t = np.empty((1, 0))
    obj = np.zeros(1)
    ref = np.asarray(pb.reference)
    for k in range(n):
        B = len(states)
        par = np.repeat(np.arange(B), n_opts)
        cand = np.tile(opts, (B, 1))
        xk = states[par]
        dt = cand[:, 2]
        nxt = np.empty((B * n_opts, 4))
        nxt[:, 0] = xk[:, 0] + xk[:, 3] * dt * np.cos(xk[:, 2])
        nxt[:, 1] = xk[:, 1] + xk[:, 3] * dt * np.sin(xk[:, 2])
        nxt[:, 2] = xk[:, 2] + xk[:, 3] * dt * np.tan(cand[:, 0]) / p.wheelbase
        nxt[:, 3] = xk[:, 3] + cand[:, 1] * dt
        keep = np.ones(B * n_opts, dtype=bool)
        if k > 0:
            prev_u = plan_u[par, k - 1]
            prev_t = plan_t[par, k - 1]
            rate = (cand[:, :2] - prev_u) / prev_t[:, None]
            keep &= np.all(rate <= p.rate_max[None, :] + 1e-12, axis=1)
            keep &= np.all(rate >= p.rate_min[None, :] - 1e-12, axis=1)
        if k + 1 <= n - 1:
            if it.gear[k + 1] != 0:
                keep &= it.gear[k + 1] * nxt[:, 3] >= -1e-12
            else:
                keep &= np.abs(nxt[:, 3]) <= 1e-12
        stage = np.zeros(B * n_opts)
        if (k + 1) in free:
            for obs in pb.obstacles:
                sd = _batch_clearance(nxt, p.shape, obs)
                keep &= sd >= cfg.eps_clear
                stage += w.w_d * np.exp(-np.where(sd > 0.0, sd, cfg.eps_clear))
        diff = nxt - ref[k + 1][None, :]
        stage += w.w_x * np.einsum("bi,bi->b", diff, diff)
        stage += w.w_u * np.einsum("bi,bi->b", cand[:, :2], cand[:, :2])
        if w.w_x_rate:
            step_d = nxt - xk
            stage += w.w_x_rate * np.einsum("bi,bi->b", step_d, step_d) / dt
        if not keep.any():
            raise NoFeasibleGridPoint(
                "no grid combination survives step %d of %s" % (k, scenario.name)
            )
        states = nxt[keep]
        plan_u = np.concatenate(
            [plan_u[par[keep]], cand[keep, None, :2]], axis=1)
        plan_t = np.concatenate(
            [plan_t[par[keep]], cand[keep, None, 2]], axis=1)
        obj = obj[par[keep]] + stage[keep]

    best = int(np.argmin(obj))
    u_best = plan_u[best]
    t_best = plan_t[best]
    x_best = rollout_array(it.states[0], u_best, t_best, p.wheelbase)
    clear = np.full(n + 1, np.inf)
    for obs in pb.obstacles:
        clear = np.minimum(clear, _batch_clearance(x_best, p.shape, obs))
    tracking = w.w_x * float(np.sum((x_best[0] - ref[0]) ** 2))
    report = SolveReport(
        converged=True,
        iterations=len(obj),
        primal_sq=0.0,
        dual_sq=0.0,
        objective=float(obj[best]) + tracking,
        solve_time=time.perf_counter() - t0,
    )
    return PlannedTrajectory(
        states=x_best,
        controls=u_best,
        dts=t_best,
        clearances=clear,
        gear=it.gear.copy(),
        report=report,
    )
