"""Multiplier-based collision avoidance between the ego body and convex obstacles.

A pair of multiplier vectors (lam, mu) together with a slack d certifies
separation between the placed ego footprint {R p + t : G p <= g} and an
obstacle {q : A q <= b}.  The certificate is encoded by two residuals

    clearance residual   d - g^T mu + (A t - b)^T lam        (scalar)
    rotation residual    G^T mu + R^T A^T lam                (2-vector)

which vanish for a valid certificate, plus the cone conditions lam >= 0,
mu >= 0 and ||A^T lam|| <= 1.  When the residuals vanish, weak duality of
the polytope distance problem gives signed_distance >= -d, and maximising
the certified clearance recovers the distance exactly for separated pairs.

All solves in this module go through the conic kernel and stay small: one
(lam, mu, d) block has len(b) + 5 variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conic import ConeSpec, solve_cone_qp, solve_cone_qp_batch
from .geometry import ConvexPolytope, VehicleShape

_EGO_FACES = 4


class DualBlockFailure(RuntimeError):
    """The conic kernel reported failure on a certificate subproblem."""


@dataclass(frozen=True)
class DualState:
    """Separation certificate multipliers for one (knot, obstacle) pair.

    lam has one entry per obstacle face, mu one per ego face, d is the
    clearance slack in meters (certified clearance is -d).
    """

    lam: np.ndarray
    mu: np.ndarray
    d: float

    def __post_init__(self):
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        if self.mu.shape != (_EGO_FACES,):
            raise ValueError("mu must have one entry per ego face")

    def cone_gap(self, obstacle: ConvexPolytope) -> float:
        """||A^T lam|| - 1; nonpositive inside the cone."""
        return float(np.linalg.norm(obstacle.A.T @ self.lam) - 1.0)

    @classmethod
    def zeros(cls, n_faces: int, d: float = 0.0) -> "DualState":
        return cls(np.zeros(n_faces), np.zeros(_EGO_FACES), d)


@dataclass(frozen=True)
class ClearanceResiduals:
    g_val: float
    h_val: np.ndarray


@dataclass(frozen=True)
class CertificateCoefficients:
    """Terms of the residuals that depend only on (lam, mu).

    With t the footprint translation and R the heading rotation:
        G residual = d + atl . t - offset
        H residual = gtm + R^T atl
    """

    atl: np.ndarray  # A^T lam
    offset: float  # b^T lam + g^T mu
    gtm: np.ndarray  # G^T mu


def certificate_coefficients(
    dual: DualState, obstacle: ConvexPolytope, shape: VehicleShape
) -> CertificateCoefficients:
    atl = obstacle.A.T @ dual.lam
    offset = float(obstacle.b @ dual.lam + shape.g @ dual.mu)
    gtm = shape.G.T @ dual.mu
    return CertificateCoefficients(atl=atl, offset=offset, gtm=gtm)


def clearance_residual_G(x, dual: DualState, obstacle: ConvexPolytope, shape: VehicleShape) -> float:
    """d - g^T mu + (A t(x) - b)^T lam at the given ego state."""
    t = np.array([x.x, x.y])
    co = certificate_coefficients(dual, obstacle, shape)
    return float(dual.d + co.atl @ t - co.offset)


def rotation_residual_H(x, dual: DualState, obstacle: ConvexPolytope, shape: VehicleShape) -> np.ndarray:
    """G^T mu + R(x)^T A^T lam at the given ego state."""
    co = certificate_coefficients(dual, obstacle, shape)
    c, s = math.cos(x.heading), math.sin(x.heading)
    rt_atl = np.array([c * co.atl[0] + s * co.atl[1], -s * co.atl[0] + c * co.atl[1]])
    return co.gtm + rt_atl


def residuals(x, dual: DualState, obstacle: ConvexPolytope, shape: VehicleShape) -> ClearanceResiduals:
    return ClearanceResiduals(
        g_val=clearance_residual_G(x, dual, obstacle, shape),
        h_val=rotation_residual_H(x, dual, obstacle, shape),
    )


def verify_dual_certificate(
    x, dual: DualState, obstacle: ConvexPolytope, shape: VehicleShape, tol: float = 1e-6
) -> bool:
    """True iff the certificate is cone-feasible and both residuals vanish.

    A passing certificate with d < 0 guarantees the footprint at x keeps
    signed distance at least -d - tol from the obstacle.
    """
    if float(dual.lam.min(initial=0.0)) < -tol or float(dual.mu.min(initial=0.0)) < -tol:
        return False
    if dual.cone_gap(obstacle) > tol:
        return False
    if abs(clearance_residual_G(x, dual, obstacle, shape)) > tol:
        return False
    return float(np.linalg.norm(rotation_residual_H(x, dual, obstacle, shape))) <= tol


def _block_geometry(x, obstacle: ConvexPolytope, shape: VehicleShape):
    """Residual maps as affine functions of z = (lam, mu, d).

    Returns (c_G, M_H, nz): G residual = c_G . z + 0, H residual = M_H z.
    """
    n = len(obstacle.b)
    nz = n + _EGO_FACES + 1
    t = np.array([x.x, x.y])
    c_G = np.empty(nz)
    c_G[:n] = obstacle.A @ t - obstacle.b
    c_G[n : n + _EGO_FACES] = -shape.g
    c_G[-1] = 1.0
    c, s = math.cos(x.heading), math.sin(x.heading)
    rt = np.array([[c, s], [-s, c]])
    M_H = np.zeros((2, nz))
    M_H[:, :n] = rt @ obstacle.A.T
    M_H[:, n : n + _EGO_FACES] = shape.G.T
    return c_G, M_H, nz


def _cone_rows(obstacle: ConvexPolytope, nz: int, d_bound: float):
    """Inequality rows: lam >= 0, mu >= 0, d <= d_bound, ||A^T lam|| <= 1."""
    n = len(obstacle.b)
    n_orth = nz  # one sign row per variable
    G = np.zeros((n_orth + 3, nz))
    h = np.zeros(n_orth + 3)
    G[: n + _EGO_FACES, : n + _EGO_FACES] = -np.eye(n + _EGO_FACES)
    G[n + _EGO_FACES, nz - 1] = 1.0
    h[n + _EGO_FACES] = d_bound
    # (1, A^T lam) in the second-order cone
    h[n_orth] = 1.0
    G[n_orth + 1 : n_orth + 3, :n] = -obstacle.A.T
    return G, h, ConeSpec(nonneg=n_orth, soc=(3,))


def _unpack(z: np.ndarray, n: int) -> DualState:
    return DualState(lam=z[:n].copy(), mu=z[n : n + _EGO_FACES].copy(), d=float(z[-1]))


def solve_dual_block(
    x,
    obstacle: ConvexPolytope,
    shape: VehicleShape,
    zeta: float,
    xi: np.ndarray,
    rho: float,
    d_prev: float,
    w_d: float = 0.0,
    eps_clear: float = 0.0,
    tol: float = 1e-9,
    step_cap: float = 1.0,
) -> DualState:
    """Certificate update for one (knot, obstacle) pair with the pose fixed.

    Minimises a quadratic model of
        w_d * exp(d) + (rho/2) (G_res + zeta)^2 + (rho/2) ||H_res + xi||^2
    over lam, mu >= 0, ||A^T lam|| <= 1, d <= -eps_clear.  The
    exponential enters through the majorizer
        exp(d_prev) * (1 + s + exp(step_cap) * s^2 / 2),  s = d - d_prev,
    which upper-bounds exp(d) for all s <= step_cap (enforced as an
    extra bound on d), so a solve never gains fictitious clearance
    credit; iterating with d_prev set to the previous solution converges
    to the exact subproblem optimum.  A plain tangent model is unusable
    here: it is unbounded below in d and trades real residual error for
    imaginary exponential descent.

    The feasible set always contains (0, 0, min(-eps_clear, d_prev));
    an infeasible status from the kernel therefore signals a kernel bug
    and raises.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    c_G, M_H, nz = _block_geometry(x, obstacle, shape)
    P = rho * (np.outer(c_G, c_G) + M_H.T @ M_H)
    q = rho * (zeta * c_G + M_H.T @ np.asarray(xi, dtype=float))
    d_bound = -eps_clear
    if w_d > 0.0:
        slope = w_d * math.exp(min(d_prev, 0.0))
        curv = slope * math.exp(step_cap)
        P[-1, -1] += curv
        q[-1] += slope - curv * d_prev
        d_bound = min(d_bound, d_prev + step_cap)
    G, h, cone = _cone_rows(obstacle, nz, d_bound)
    z, report = solve_cone_qp(P, q, G, h, cone, tol=tol)
    if report.status in ("infeasible", "numerical_failure"):
        raise DualBlockFailure("certificate block %s (always feasible)" % report.status)
    return _unpack(z, len(obstacle.b))


def max_clearance_socp(
    x, obstacle: ConvexPolytope, shape: VehicleShape, tol: float = 1e-9
) -> tuple[DualState, float]:
    """Largest clearance certifiable at a fixed pose.

    Minimises d subject to both residuals being zero and the cone
    constraints; returns (certificate, -d).  For separated pairs the
    result equals the geometric signed distance; for touching or
    overlapping pairs it is 0.
    """
    c_G, M_H, nz = _block_geometry(x, obstacle, shape)
    q = np.zeros(nz)
    q[-1] = 1.0
    Aeq = np.vstack([c_G[None, :], M_H])
    beq = np.zeros(3)
    G, h, cone = _cone_rows(obstacle, nz, 0.0)
    z, report = solve_cone_qp(None, q, G, h, cone, Aeq=Aeq, beq=beq, tol=tol)
    if report.status in ("infeasible", "numerical_failure"):
        raise DualBlockFailure("max-clearance program %s" % report.status)
    dual = _unpack(z, len(obstacle.b))
    return dual, -dual.d


def warmstart_duals_qp(
    states,
    obstacles,
    shape: VehicleShape,
    beta: float,
    eps_clear: float = 0.0,
    tol: float = 1e-9,
) -> list[list[DualState]]:
    """Quadratic-penalty certificate initialisation along a reference path.

    Per (state, obstacle) pair solves
        min (1/beta) ||A^T lam||^2 + d
        s.t. both residuals zero, lam, mu >= 0, d <= -eps_clear
    i.e. the cone constraint is moved into the objective.  The raw
    optimiser can leave the unit cone, so the returned certificate is
    rescaled by 1 / max(1, ||A^T lam||), which restores cone feasibility
    and keeps -d a valid (possibly loose) clearance lower bound.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    out: list[list[DualState]] = []
    for x in states:
        row: list[DualState] = []
        for obstacle in obstacles:
            c_G, M_H, nz = _block_geometry(x, obstacle, shape)
            n = len(obstacle.b)
            P = np.zeros((nz, nz))
            P[:n, :n] = (2.0 / beta) * (obstacle.A @ obstacle.A.T)
            q = np.zeros(nz)
            q[-1] = 1.0
            Aeq = np.vstack([c_G[None, :], M_H])
            beq = np.zeros(3)
            # sign rows only; no cone block in the relaxed problem
            G = np.zeros((nz, nz))
            G[: n + _EGO_FACES, : n + _EGO_FACES] = -np.eye(n + _EGO_FACES)
            G[-1, -1] = 1.0
            h = np.zeros(nz)
            h[-1] = -eps_clear
            z, report = solve_cone_qp(P, q, G, h, ConeSpec(nonneg=nz), Aeq=Aeq, beq=beq, tol=tol)
            if report.status in ("infeasible", "numerical_failure"):
                raise DualBlockFailure("certificate warm start %s" % report.status)
            dual = _unpack(z, n)
            scale = max(1.0, np.linalg.norm(obstacle.A.T @ dual.lam))
            if scale > 1.0:
                dual = DualState(dual.lam / scale, dual.mu / scale, dual.d / scale)
            row.append(dual)
        out.append(row)
    return out


def _batch_geometry(poses: np.ndarray, obstacle: ConvexPolytope, shape: VehicleShape):
    """Vectorized _block_geometry over B poses given as rows (x, y, heading)."""
    n = len(obstacle.b)
    nz = n + _EGO_FACES + 1
    B = poses.shape[0]
    c_G = np.zeros((B, nz))
    c_G[:, :n] = poses[:, :2] @ obstacle.A.T - obstacle.b[None]
    c_G[:, n : n + _EGO_FACES] = -shape.g[None]
    c_G[:, -1] = 1.0
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    M_H = np.zeros((B, 2, nz))
    at = obstacle.A.T  # (2, n)
    M_H[:, 0, :n] = c[:, None] * at[0] + s[:, None] * at[1]
    M_H[:, 1, :n] = -s[:, None] * at[0] + c[:, None] * at[1]
    M_H[:, :, n : n + _EGO_FACES] = shape.G.T[None]
    return c_G, M_H, nz


def solve_dual_block_batch(
    poses: np.ndarray,
    obstacle: ConvexPolytope,
    shape: VehicleShape,
    zetas: np.ndarray,
    xis: np.ndarray,
    rho: float,
    d_prevs: np.ndarray,
    w_d: float = 0.0,
    eps_clear: float = 0.0,
    tol: float = 1e-9,
    step_cap: float = 1.0,
) -> list[DualState]:
    """solve_dual_block for B knots against one obstacle in a single call.

    All problems share the cone rows (they depend only on the obstacle),
    so the whole batch runs through the lockstep kernel path; any problem
    it cannot finish falls back to the scalar solver.  Uses the same
    majorized exponential model as the scalar path, so the per-problem
    d bound lands in a per-problem h column.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    poses = np.asarray(poses, dtype=float)
    zetas = np.asarray(zetas, dtype=float)
    xis = np.asarray(xis, dtype=float)
    d_prevs = np.asarray(d_prevs, dtype=float)
    B = poses.shape[0]
    c_G, M_H, nz = _batch_geometry(poses, obstacle, shape)
    P = rho * (
        np.einsum("bi,bj->bij", c_G, c_G) + np.einsum("bri,brj->bij", M_H, M_H)
    )
    q = rho * (zetas[:, None] * c_G + np.einsum("brj,br->bj", M_H, xis))
    G, h, cone = _cone_rows(obstacle, nz, -eps_clear)
    if w_d > 0.0:
        slopes = w_d * np.exp(np.minimum(d_prevs, 0.0))
        curvs = slopes * math.exp(step_cap)
        P[:, -1, -1] += curvs
        q[:, -1] += slopes - curvs * d_prevs
        hb = np.tile(h, (B, 1))
        # one sign row per lam/mu entry, then the d upper bound row
        hb[:, nz - 1] = np.minimum(-eps_clear, d_prevs + step_cap)
    else:
        hb = h
    Z, statuses = solve_cone_qp_batch(P, q, G, hb, cone, tol=tol)
    n_faces = len(obstacle.b)
    out: list[DualState] = []
    for i in range(B):
        if statuses[i] == "optimal":
            out.append(_unpack(Z[i], n_faces))
        else:
            pose = _PoseView(poses[i, 0], poses[i, 1], poses[i, 2])
            out.append(
                solve_dual_block(
                    pose, obstacle, shape, float(zetas[i]), xis[i], rho,
                    float(d_prevs[i]), w_d=w_d, eps_clear=eps_clear, tol=tol,
                    step_cap=step_cap,
                )
            )
    return out


def solve_dual_block_multi(
    poses: np.ndarray,
    obstacles,
    obs_idx: np.ndarray,
    shape: VehicleShape,
    zetas: np.ndarray,
    xis: np.ndarray,
    rho: float,
    d_prevs: np.ndarray,
    w_d: float = 0.0,
    eps_clear: float = 0.0,
    tol: float = 1e-9,
    step_cap: float = 1.0,
) -> list[DualState]:
    """solve_dual_block for B (pose, obstacle) pairs in a single call.

    obs_idx maps each row of poses to an entry of obstacles.  Every
    obstacle must have the same number of faces so all problems share
    one cone layout; the constraint rows then stack per problem and the
    whole mixed batch runs through the lockstep kernel at once.  Any
    problem the kernel cannot finish falls back to the scalar solver.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    poses = np.asarray(poses, dtype=float)
    zetas = np.asarray(zetas, dtype=float)
    xis = np.asarray(xis, dtype=float)
    d_prevs = np.asarray(d_prevs, dtype=float)
    obs_idx = np.asarray(obs_idx, dtype=int)
    n_faces = len(obstacles[0].b)
    if any(len(o.b) != n_faces for o in obstacles):
        raise ValueError("obstacles must share one face count")
    B = poses.shape[0]
    nz = n_faces + _EGO_FACES + 1
    P = np.empty((B, nz, nz))
    q = np.empty((B, nz))
    G_all = np.empty((len(obstacles), nz + 3, nz))
    h_all = np.empty((len(obstacles), nz + 3))
    cone = None
    for j, obs in enumerate(obstacles):
        G_all[j], h_all[j], cone = _cone_rows(obs, nz, -eps_clear)
        rows = np.flatnonzero(obs_idx == j)
        if len(rows) == 0:
            continue
        c_G, M_H, _ = _batch_geometry(poses[rows], obs, shape)
        P[rows] = rho * (
            np.einsum("bi,bj->bij", c_G, c_G)
            + np.einsum("bri,brj->bij", M_H, M_H)
        )
        q[rows] = rho * (
            zetas[rows, None] * c_G + np.einsum("brj,br->bj", M_H, xis[rows])
        )
    Gb = G_all[obs_idx]
    hb = h_all[obs_idx]
    if w_d > 0.0:
        slopes = w_d * np.exp(np.minimum(d_prevs, 0.0))
        curvs = slopes * math.exp(step_cap)
        P[:, -1, -1] += curvs
        q[:, -1] += slopes - curvs * d_prevs
        # one sign row per lam/mu entry, then the d upper bound row
        hb[:, nz - 1] = np.minimum(-eps_clear, d_prevs + step_cap)
    Z, statuses = solve_cone_qp_batch(P, q, Gb, hb, cone, tol=tol)
    out: list[DualState] = []
    for i in range(B):
        if statuses[i] == "optimal":
            out.append(_unpack(Z[i], n_faces))
        else:
            pose = _PoseView(poses[i, 0], poses[i, 1], poses[i, 2])
            out.append(
                solve_dual_block(
                    pose, obstacles[obs_idx[i]], shape, float(zetas[i]),
                    xis[i], rho, float(d_prevs[i]), w_d=w_d,
                    eps_clear=eps_clear, tol=tol, step_cap=step_cap,
                )
            )
    return out


@dataclass(frozen=True)
class _PoseView:
    x: float
    y: float
    heading: float
