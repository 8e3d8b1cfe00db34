"""Convex cone-program kernel shared by every solver block.

Internal standard form:

    minimize    0.5 x^T P x + q^T x
    subject to  A x = b
                G x + s = h,   s in K

where K is a product of a nonnegative orthant and second-order cones
(t, u) with ||u|| <= t. Everything is solved by one Nesterov-Todd scaled
Mehrotra predictor-corrector primal-dual interior-point method with dense
and sparse KKT paths. `QpProblem` and `SocpProblem` are the user-facing
surfaces; both lower to the standard form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lu_factor, lu_solve

_STEP_FRAC = 0.99
_SPARSE_N_THRESHOLD = 160


@dataclass(frozen=True)
class ConeSpec:
    """Product cone layout: `nonneg` orthant rows followed by SOC blocks."""

    nonneg: int = 0
    soc: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.nonneg < 0 or any(d < 1 for d in self.soc):
            raise ValueError("invalid cone dimensions")
        # dimension-1 second-order cones are plain nonnegativity
        if any(d == 1 for d in self.soc):
            extra = sum(1 for d in self.soc if d == 1)
            object.__setattr__(self, "nonneg", self.nonneg + extra)
            object.__setattr__(self, "soc", tuple(d for d in self.soc if d > 1))

    @property
    def size(self) -> int:
        return self.nonneg + sum(self.soc)

    @property
    def degree(self) -> int:
        return self.nonneg + len(self.soc)

    def soc_slices(self) -> list[slice]:
        out = []
        off = self.nonneg
        for d in self.soc:
            out.append(slice(off, off + d))
            off += d
        return out

    def identity(self) -> np.ndarray:
        e = np.zeros(self.size)
        e[: self.nonneg] = 1.0
        for sl in self.soc_slices():
            e[sl.start] = 1.0
        return e


@dataclass
class SolveReport:
    status: str
    iterations: int
    objective: float
    max_violation: float
    gap: float = 0.0
    certificate: float = 0.0


@dataclass
class QpProblem:
    """min 0.5 z^T P z + q^T z with equalities, inequalities Ain z <= bin, box bounds."""

    P: object
    q: np.ndarray
    Aeq: object = None
    beq: np.ndarray | None = None
    Ain: object = None
    bin: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def validate(self) -> None:
        n = len(self.q)
        P = self.P
        if sp.issparse(P):
            sym = abs(P - P.T).max() if P.nnz else 0.0
            shape = P.shape
        else:
            P = np.asarray(P, dtype=float)
            sym = float(np.abs(P - P.T).max()) if P.size else 0.0
            shape = P.shape
        if shape != (n, n):
            raise ValueError("P must be n x n")
        if sym > 1e-12 * max(1.0, _matrix_scale(P)):
            raise ValueError("P must be symmetric within 1e-12")
        _check_system(self.Aeq, self.beq, n, "equality")
        _check_system(self.Ain, self.bin, n, "inequality")
        for name, bound in (("lb", self.lb), ("ub", self.ub)):
            if bound is not None and len(np.asarray(bound)) != n:
                raise ValueError("%s has wrong length" % name)


@dataclass
class SocpProblem:
    """min c^T z with equalities, inequalities, and cones over variable index sets.

    Each cone is a sequence of variable indices (t, u_1, ..., u_d) meaning
    ||u|| <= z_t. Index sets must be pairwise disjoint.
    """

    c: np.ndarray
    Aeq: object = None
    beq: np.ndarray | None = None
    Ain: object = None
    bin: np.ndarray | None = None
    cones: list = field(default_factory=list)

    def validate(self) -> None:
        n = len(self.c)
        _check_system(self.Aeq, self.beq, n, "equality")
        _check_system(self.Ain, self.bin, n, "inequality")
        seen: set[int] = set()
        for cone in self.cones:
            idx = list(cone)
            if not idx:
                raise ValueError("empty cone index set")
            if any(i < 0 or i >= n for i in idx):
                raise ValueError("cone index out of range")
            if seen.intersection(idx):
                raise ValueError("cone index sets must be disjoint")
            seen.update(idx)


def _matrix_scale(M) -> float:
    if sp.issparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    return float(np.abs(M).max()) if M.size else 0.0


def _check_system(A, b, n: int, label: str) -> None:
    if A is None and b is None:
        return
    if A is None or b is None:
        raise ValueError("%s system needs both matrix and rhs" % label)
    shape = A.shape
    if shape[1] != n or shape[0] != len(np.asarray(b)):
        raise ValueError("%s system dimensions inconsistent" % label)


# ---------------------------------------------------------------------------
# Jordan algebra helpers over the product cone


def _jprod(cone: ConeSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    nl = cone.nonneg
    out[:nl] = u[:nl] * v[:nl]
    for sl in cone.soc_slices():
        ub, vb = u[sl], v[sl]
        out[sl.start] = ub @ vb
        out[sl.start + 1 : sl.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
    return out


def _jdiv(cone: ConeSpec, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Solve lam o u = d for u."""
    out = np.empty_like(d)
    nl = cone.nonneg
    out[:nl] = d[:nl] / lam[:nl]
    for sl in cone.soc_slices():
        lb, db = lam[sl], d[sl]
        a = lb[0] * lb[0] - lb[1:] @ lb[1:]
        u0 = (lb[0] * db[0] - lb[1:] @ db[1:]) / a
        out[sl.start] = u0
        out[sl.start + 1 : sl.stop] = (db[1:] - u0 * lb[1:]) / lb[0]
    return out


def _margin(cone: ConeSpec, v: np.ndarray) -> float:
    """Distance-to-boundary proxy; positive strictly inside the cone."""
    vals = []
    nl = cone.nonneg
    if nl:
        vals.append(float(v[:nl].min()))
    for sl in cone.soc_slices():
        vals.append(float(v[sl.start] - np.linalg.norm(v[sl.start + 1 : sl.stop])))
    return min(vals) if vals else math.inf


def _max_step(cone: ConeSpec, lam: np.ndarray, d: np.ndarray) -> float:
    """Largest alpha with lam + alpha d still in the cone."""
    alpha = math.inf
    nl = cone.nonneg
    if nl:
        neg = d[:nl] < 0
        if np.any(neg):
            alpha = float((-lam[:nl][neg] / d[:nl][neg]).min())
    for sl in cone.soc_slices():
        lb, db = lam[sl], d[sl]
        a = db[0] * db[0] - db[1:] @ db[1:]
        b = lb[0] * db[0] - lb[1:] @ db[1:]
        c = lb[0] * lb[0] - lb[1:] @ lb[1:]
        roots = []
        if abs(a) < 1e-14 * max(1.0, abs(b)):
            if b < 0:
                roots.append(-c / (2.0 * b))
        else:
            disc = b * b - a * c
            if disc >= 0.0:
                sq = math.sqrt(disc)
                for r in ((-b - sq) / a, (-b + sq) / a):
                    if r > 0:
                        roots.append(r)
        if db[0] < 0:
            roots.append(-lb[0] / db[0])
        if roots:
            alpha = min(alpha, min(roots))
    return alpha


class _Scaling:
    """Nesterov-Todd scaling point data for the product cone."""

    def __init__(self, cone: ConeSpec, s: np.ndarray, z: np.ndarray):
        self.cone = cone
        nl = cone.nonneg
        self.w_orth = np.sqrt(s[:nl] / z[:nl])
        self.soc_data = []
        lam = np.empty(cone.size)
        lam[:nl] = np.sqrt(s[:nl] * z[:nl])
        for sl in cone.soc_slices():
            sb, zb = s[sl], z[sl]
            a_s = sb[0] * sb[0] - sb[1:] @ sb[1:]
            a_z = zb[0] * zb[0] - zb[1:] @ zb[1:]
            a_s = max(a_s, 1e-300)
            a_z = max(a_z, 1e-300)
            sbar = sb / math.sqrt(a_s)
            zbar = zb / math.sqrt(a_z)
            gamma = math.sqrt(max((1.0 + sbar @ zbar) / 2.0, 1e-300))
            wbar = sbar.copy()
            wbar[0] += zbar[0]
            wbar[1:] -= zbar[1:]
            wbar /= 2.0 * gamma
            # reflector uses the Jordan square root of the scaling point
            v = wbar.copy()
            v[0] += 1.0
            v /= math.sqrt(2.0 * (wbar[0] + 1.0))
            eta = (a_s / a_z) ** 0.25
            self.soc_data.append((eta, v))
            lam[sl] = self._soc_mul(eta, v, zb)
        self.lam = lam

    @staticmethod
    def _soc_mul(eta: float, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
        # W v = eta (2 wbar (wbar.v) - J v)
        t = 2.0 * (wbar @ v)
        out = t * wbar
        out[0] -= v[0]
        out[1:] += v[1:]
        return eta * out

    @staticmethod
    def _soc_mul_inv(eta: float, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
        # W^-1 v = (1/eta) (2 (J wbar)(wbar . J v) - J v)
        jv = v.copy()
        jv[1:] = -jv[1:]
        t = 2.0 * (wbar @ jv)
        out = t * wbar
        out[1:] = -out[1:]
        out[0] -= jv[0]
        out[1:] -= jv[1:]
        return out / eta

    def mult_w(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.cone.nonneg
        out[:nl] = self.w_orth * v[:nl]
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            out[sl] = self._soc_mul(eta, wbar, v[sl])
        return out

    def mult_winv(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.cone.nonneg
        out[:nl] = v[:nl] / self.w_orth
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            out[sl] = self._soc_mul_inv(eta, wbar, v[sl])
        return out

    def winv_matrix_dense(self, G: np.ndarray) -> np.ndarray:
        out = np.empty_like(G)
        nl = self.cone.nonneg
        out[:nl] = G[:nl] / self.w_orth[:, None]
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            blk = G[sl].copy()
            blk[1:] = -blk[1:]
            t = 2.0 * (wbar @ blk)
            res = wbar[:, None] * t
            res[1:] = -res[1:]
            res[0] -= blk[0]
            res[1:] -= blk[1:]
            out[sl] = res / eta
        return out

    def winv_matrix_sparse(self, G: sp.csr_matrix) -> sp.csr_matrix:
        nl = self.cone.nonneg
        parts = []
        if nl:
            D = sp.diags(1.0 / self.w_orth)
            parts.append(D @ G[:nl])
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            blk = G[sl].toarray()
            blk[1:] = -blk[1:]
            t = 2.0 * (wbar @ blk)
            res = wbar[:, None] * t
            res[1:] = -res[1:]
            res[0] -= blk[0]
            res[1:] -= blk[1:]
            parts.append(sp.csr_matrix(res / eta))
        return sp.vstack(parts, format="csr") if parts else G


# ---------------------------------------------------------------------------
# Core solver


class _Kkt:
    """Reduced KKT system [[P + Gw^T Gw, A^T], [A, 0]] with refinement."""

    def __init__(self, P, A, n: int, p: int, sparse: bool):
        self.P, self.A, self.n, self.p, self.sparse = P, A, n, p, sparse
        self.M = None
        self.fact = None

    def factor(self, Gw) -> None:
        n, p = self.n, self.p
        if self.sparse:
            PW = (self.P + Gw.T @ Gw).tocsc() if Gw is not None else sp.csc_matrix(self.P)
            if p:
                M = sp.bmat([[PW, self.A.T], [self.A, None]], format="csc")
            else:
                M = PW
            self.M = M
            self.fact = spla.splu(M.tocsc())
        else:
            M = np.zeros((n + p, n + p))
            M[:n, :n] = self.P
            if Gw is not None:
                M[:n, :n] += Gw.T @ Gw
            if p:
                M[:n, n:] = self.A.T
                M[n:, :n] = self.A
            self.M = M
            self.fact = lu_factor(M)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.sparse:
            sol = self.fact.solve(rhs)
            resid = rhs - self.M @ sol
            sol += self.fact.solve(resid)
        else:
            sol = lu_solve(self.fact, rhs)
            resid = rhs - self.M @ sol
            sol += lu_solve(self.fact, resid)
        return sol


def solve_cone_qp(
    P,
    q: np.ndarray,
    G,
    h: np.ndarray | None,
    cone: ConeSpec | None,
    Aeq=None,
    beq: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 60,
) -> tuple[np.ndarray, SolveReport]:
    """Solve the standard-form cone QP. This is the kernel entry point."""
    q = np.asarray(q, dtype=float)
    n = len(q)
    cone = cone or ConeSpec()
    m = cone.size
    p = 0 if beq is None else len(beq)
    use_sparse = sp.issparse(P) or sp.issparse(G) or sp.issparse(Aeq) or n > _SPARSE_N_THRESHOLD

    if use_sparse:
        if P is None:
            P = sp.csr_matrix((n, n))
        else:
            P = P.tocsr() if sp.issparse(P) else sp.csr_matrix(P)
        if G is not None:
            G = G.tocsr() if sp.issparse(G) else sp.csr_matrix(G)
        A = None
        if Aeq is not None:
            A = Aeq.tocsr() if sp.issparse(Aeq) else sp.csr_matrix(Aeq)
    else:
        P = np.asarray(P, dtype=float) if P is not None else np.zeros((n, n))
        G = np.asarray(G, dtype=float) if G is not None else None
        A = np.asarray(Aeq, dtype=float) if Aeq is not None else None
    b = np.asarray(beq, dtype=float) if beq is not None else np.zeros(0)
    h = np.asarray(h, dtype=float) if h is not None else np.zeros(0)
    if m != len(h):
        raise ValueError("cone size %d does not match h length %d" % (m, len(h)))

    def matvec(M, v):
        return M @ v

    kkt = _Kkt(P, A, n, p, use_sparse)

    if m == 0:
        return _solve_equality_qp(kkt, P, q, A, b, n, p, tol)

    # interior starting point from the least-squares system with W = I
    e = cone.identity()
    try:
        kkt.factor(G)
        rhs = np.concatenate([-q + G.T @ h, b])
        sol = kkt.solve(rhs)
    except (np.linalg.LinAlgError, RuntimeError, ValueError):
        return np.zeros(n), SolveReport("numerical_failure", 0, math.nan, math.inf)
    x = sol[:n]
    y = sol[n:]
    s_hat = h - matvec(G, x)
    mrg = _margin(cone, s_hat)
    s = s_hat if mrg > 1e-6 else s_hat + (1.0 - mrg) * e
    z_hat = -s_hat
    mrg_z = _margin(cone, z_hat)
    z = z_hat if mrg_z > 1e-6 else z_hat + (1.0 - mrg_z) * e

    hnorm = 1.0 + np.linalg.norm(h)
    bnorm = 1.0 + np.linalg.norm(b)
    qnorm = 1.0 + np.linalg.norm(q)
    best = None

    status = "max_iter"
    iters = 0
    for it in range(max_iter):
        iters = it + 1
        Px = matvec(P, x)
        rx = Px + q + matvec(G.T, z) + (matvec(A.T, y) if p else 0.0)
        ry = matvec(A, x) - b if p else np.zeros(0)
        rz = matvec(G, x) + s - h
        gap = float(s @ z)
        mu = gap / cone.degree
        pobj = 0.5 * float(x @ Px) + float(q @ x)

        pres = max(
            np.linalg.norm(ry) / bnorm if p else 0.0,
            np.linalg.norm(rz) / hnorm,
        )
        dres = np.linalg.norm(rx) / qnorm
        relgap = gap / max(1.0, abs(pobj))
        viol = max(
            float(np.linalg.norm(ry, np.inf)) if p else 0.0,
            float(np.linalg.norm(rz, np.inf)),
        )
        if best is None or pres + dres + relgap < best[0]:
            best = (pres + dres + relgap, x.copy(), pobj, viol, gap)
        if pres <= tol and dres <= tol and relgap <= tol:
            return x, SolveReport("optimal", iters, pobj, viol, gap)

        # Farkas-type primal infeasibility certificate
        nu = -(float(h @ z) + (float(b @ y) if p else 0.0))
        if nu > tol * (np.linalg.norm(z) + 1e-30):
            cert_res = np.linalg.norm(matvec(G.T, z) + (matvec(A.T, y) if p else 0.0))
            if cert_res <= 1e-7 * nu:
                return x, SolveReport("infeasible", iters, math.nan, viol, gap, certificate=nu)

        try:
            scal = _Scaling(cone, s, z)
            if use_sparse:
                Gw = scal.winv_matrix_sparse(G)
            else:
                Gw = scal.winv_matrix_dense(G)
            kkt.factor(Gw)
        except (np.linalg.LinAlgError, RuntimeError, ValueError, ZeroDivisionError):
            status = "numerical_failure"
            break
        lam = scal.lam

        def direction(ds_target):
            vs = _jdiv(cone, lam, ds_target)
            bz = scal.mult_winv(rz) + vs
            rhs = np.concatenate([-rx - Gw.T @ bz, -ry]) if p else (-rx - Gw.T @ bz)
            sol = kkt.solve(rhs)
            dx = sol[:n]
            dy = sol[n:] if p else np.zeros(0)
            dz_sc = Gw @ dx + bz
            ds_sc = vs - dz_sc
            return dx, dy, dz_sc, ds_sc

        try:
            lam_lam = _jprod(cone, lam, lam)
            dx_a, dy_a, dzs_a, dss_a = direction(-lam_lam)
            alpha_a = min(
                1.0,
                _max_step(cone, lam, dss_a),
                _max_step(cone, lam, dzs_a),
            )
            s_a = s + alpha_a * scal.mult_w(dss_a)
            z_a = z + alpha_a * scal.mult_winv(dzs_a)
            gap_a = max(float(s_a @ z_a), 0.0)
            sigma = min(1.0, max(0.0, (gap_a / gap) ** 3)) if gap > 0 else 0.0
            gamma = _jprod(cone, dss_a, dzs_a)
            ds_target = sigma * mu * e - lam_lam - gamma
            dx, dy, dzs, dss = direction(ds_target)
        except (np.linalg.LinAlgError, RuntimeError, ValueError, ZeroDivisionError):
            status = "numerical_failure"
            break

        alpha = min(
            1.0,
            _STEP_FRAC * _max_step(cone, lam, dss),
            _STEP_FRAC * _max_step(cone, lam, dzs),
        )
        if not math.isfinite(alpha) or alpha <= 1e-14:
            status = "numerical_failure"
            break
        x = x + alpha * dx
        if p:
            y = y + alpha * dy
        z = z + alpha * scal.mult_winv(dzs)
        s = s + alpha * scal.mult_w(dss)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z)) and np.all(np.isfinite(s))):
            status = "numerical_failure"
            break
        if mu < 1e-16 and pres < math.sqrt(tol):
            break

    if best is not None:
        _, xb, pobj, viol, gap = best
        return xb, SolveReport(status, iters, pobj, viol, gap)
    return x, SolveReport(status, iters, math.nan, math.inf)


def _solve_equality_qp(kkt, P, q, A, b, n, p, tol):
    try:
        kkt.factor(None)
        sol = kkt.solve(np.concatenate([-q, b]) if p else -q)
    except (np.linalg.LinAlgError, RuntimeError, ValueError):
        return np.zeros(n), SolveReport("numerical_failure", 0, math.nan, math.inf)
    x = sol[:n]
    viol = float(np.linalg.norm(A @ x - b, np.inf)) if p else 0.0
    pobj = 0.5 * float(x @ (P @ x)) + float(q @ x)
    status = "optimal" if viol <= max(tol, 1e-8) * (1.0 + np.linalg.norm(b, np.inf) if p else 1.0) else "numerical_failure"
    return x, SolveReport(status, 1, pobj, viol)


# ---------------------------------------------------------------------------
# Problem lowering


def _stack_rows(parts, sparse_hint: bool):
    parts = [pt for pt in parts if pt is not None and pt[0].shape[0] > 0]
    if not parts:
        return None, np.zeros(0)
    if sparse_hint or any(sp.issparse(pt[0]) for pt in parts):
        mats = [pt[0] if sp.issparse(pt[0]) else sp.csr_matrix(pt[0]) for pt in parts]
        return sp.vstack(mats, format="csr"), np.concatenate([pt[1] for pt in parts])
    return np.vstack([pt[0] for pt in parts]), np.concatenate([pt[1] for pt in parts])


def _box_rows(lb, ub, n, sparse_hint):
    rows = []
    if lb is not None:
        lb = np.asarray(lb, dtype=float)
        idx = np.where(np.isfinite(lb))[0]
        if len(idx):
            if sparse_hint:
                E = sp.csr_matrix((-np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
            else:
                E = np.zeros((len(idx), n))
                E[np.arange(len(idx)), idx] = -1.0
            rows.append((E, -lb[idx]))
    if ub is not None:
        ub = np.asarray(ub, dtype=float)
        idx = np.where(np.isfinite(ub))[0]
        if len(idx):
            if sparse_hint:
                E = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n))
            else:
                E = np.zeros((len(idx), n))
                E[np.arange(len(idx)), idx] = 1.0
            rows.append((E, ub[idx]))
    return rows


def solve_qp(
    problem: QpProblem,
    init: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 60,
) -> tuple[np.ndarray, SolveReport]:
    """Solve a QpProblem. `init` is accepted for interface stability; the
    interior-point path restarts from its canonical starting point, so
    warm and cold calls return identical results."""
    problem.validate()
    n = len(problem.q)
    sparse_hint = sp.issparse(problem.P) or sp.issparse(problem.Ain) or n > _SPARSE_N_THRESHOLD
    parts = []
    if problem.Ain is not None:
        parts.append((problem.Ain, np.asarray(problem.bin, dtype=float)))
    parts.extend(_box_rows(problem.lb, problem.ub, n, sparse_hint))
    G, h = _stack_rows(parts, sparse_hint)
    cone = ConeSpec(nonneg=len(h)) if G is not None else ConeSpec()
    return solve_cone_qp(
        problem.P,
        problem.q,
        G,
        h if G is not None else None,
        cone,
        Aeq=problem.Aeq,
        beq=problem.beq,
        tol=tol,
        max_iter=max_iter,
    )


def solve_socp(
    problem: SocpProblem,
    tol: float = 1e-6,
    max_iter: int = 60,
) -> tuple[np.ndarray, SolveReport]:
    """Solve a SocpProblem (linear objective, index-set cones)."""
    problem.validate()
    n = len(problem.c)
    sparse_hint = sp.issparse(problem.Ain) or n > _SPARSE_N_THRESHOLD
    parts = []
    if problem.Ain is not None:
        parts.append((problem.Ain, np.asarray(problem.bin, dtype=float)))
    G_orth, h_orth = _stack_rows(parts, sparse_hint)
    rows = []
    soc_dims = []
    for cone_idx in problem.cones:
        idx = list(cone_idx)
        if len(idx) == 1:
            # degenerate cone: plain t >= 0
            E = np.zeros((1, n))
            E[0, idx[0]] = -1.0
            if G_orth is None:
                G_orth, h_orth = E, np.zeros(1)
            else:
                G_orth, h_orth = _stack_rows([(G_orth, h_orth), (E, np.zeros(1))], sparse_hint)
            continue
        E = np.zeros((len(idx), n))
        E[np.arange(len(idx)), idx] = -1.0
        rows.append((E, np.zeros(len(idx))))
        soc_dims.append(len(idx))
    all_parts = []
    nonneg = 0
    if G_orth is not None:
        all_parts.append((G_orth, h_orth))
        nonneg = len(h_orth)
    all_parts.extend(rows)
    G, h = _stack_rows(all_parts, sparse_hint)
    cone = ConeSpec(nonneg=nonneg, soc=tuple(soc_dims))
    P = sp.csr_matrix((n, n)) if sparse_hint else np.zeros((n, n))
    return solve_cone_qp(
        P,
        problem.c,
        G,
        h if G is not None else None,
        cone if G is not None else ConeSpec(),
        Aeq=problem.Aeq,
        beq=problem.beq,
        tol=tol,
        max_iter=max_iter,
    )


def dump_problem(path, P, q, G, h, cone: ConeSpec, Aeq=None, beq=None) -> None:
    """Write a standard-form problem as coordinate triplets.

    Format: one record per line. `P i j v`, `q i v`, `A i j v`, `b i v`,
    `G i j v`, `h i v`, plus `cone nonneg <k>` and `cone soc <d...>`.
    Zeros are omitted. Intended for cross-checking with external solvers.
    """

    def triplets(tag, M, out):
        if M is None:
            return
        if sp.issparse(M):
            coo = M.tocoo()
            for i, j, v in zip(coo.row, coo.col, coo.data):
                out.append("%s %d %d %.17g" % (tag, i, j, v))
        else:
            M = np.asarray(M)
            for (i, j), v in np.ndenumerate(M):
                if v != 0.0:
                    out.append("%s %d %d %.17g" % (tag, i, j, v))

    def vec(tag, v, out):
        if v is None:
            return
        for i, val in enumerate(np.asarray(v)):
            if val != 0.0:
                out.append("%s %d %.17g" % (tag, i, val))

    lines: list[str] = []
    triplets("P", P, lines)
    vec("q", q, lines)
    triplets("A", Aeq, lines)
    vec("b", beq, lines)
    triplets("G", G, lines)
    vec("h", h, lines)
    lines.append("cone nonneg %d" % cone.nonneg)
    if cone.soc:
        lines.append("cone soc %s" % " ".join(str(d) for d in cone.soc))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Batched dense path: many small QPs sharing one constraint block


def _b_jprod(cone: ConeSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    nl = cone.nonneg
    out[:, :nl] = u[:, :nl] * v[:, :nl]
    for sl in cone.soc_slices():
        ub, vb = u[:, sl], v[:, sl]
        out[:, sl.start] = np.einsum("bi,bi->b", ub, vb)
        out[:, sl.start + 1 : sl.stop] = (
            ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        )
    return out


def _b_jdiv(cone: ConeSpec, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    nl = cone.nonneg
    out[:, :nl] = d[:, :nl] / lam[:, :nl]
    for sl in cone.soc_slices():
        lb, db = lam[:, sl], d[:, sl]
        a = lb[:, 0] * lb[:, 0] - np.einsum("bi,bi->b", lb[:, 1:], lb[:, 1:])
        u0 = (lb[:, 0] * db[:, 0] - np.einsum("bi,bi->b", lb[:, 1:], db[:, 1:])) / a
        out[:, sl.start] = u0
        out[:, sl.start + 1 : sl.stop] = (db[:, 1:] - u0[:, None] * lb[:, 1:]) / lb[:, :1]
    return out


def _b_margin(cone: ConeSpec, v: np.ndarray) -> np.ndarray:
    parts = []
    nl = cone.nonneg
    if nl:
        parts.append(v[:, :nl].min(axis=1))
    for sl in cone.soc_slices():
        parts.append(v[:, sl.start] - np.linalg.norm(v[:, sl.start + 1 : sl.stop], axis=1))
    return np.min(np.stack(parts, axis=1), axis=1) if parts else np.full(len(v), np.inf)


def _b_max_step(cone: ConeSpec, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
    B = lam.shape[0]
    alpha = np.full(B, np.inf)
    nl = cone.nonneg
    if nl:
        ln, dn = lam[:, :nl], d[:, :nl]
        neg = dn < 0
        d_safe = np.where(neg, dn, -1.0)
        ratios = np.where(neg, -ln / d_safe, np.inf)
        alpha = np.minimum(alpha, ratios.min(axis=1))
    for sl in cone.soc_slices():
        lb, db = lam[:, sl], d[:, sl]
        a = db[:, 0] * db[:, 0] - np.einsum("bi,bi->b", db[:, 1:], db[:, 1:])
        b = lb[:, 0] * db[:, 0] - np.einsum("bi,bi->b", lb[:, 1:], db[:, 1:])
        c = lb[:, 0] * lb[:, 0] - np.einsum("bi,bi->b", lb[:, 1:], lb[:, 1:])
        lin = np.abs(a) < 1e-14 * np.maximum(1.0, np.abs(b))
        b_safe = np.where(b < 0, b, -1.0)
        r_lin = np.where(b < 0, -c / (2.0 * b_safe), np.inf)
        a_safe = np.where(lin, 1.0, a)
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        r1 = (-b - sq) / a_safe
        r2 = (-b + sq) / a_safe
        ok = (~lin) & (disc >= 0.0)
        r1 = np.where(ok & (r1 > 0), r1, np.inf)
        r2 = np.where(ok & (r2 > 0), r2, np.inf)
        r_quad = np.minimum(r1, r2)
        soc_alpha = np.where(lin, r_lin, r_quad)
        d0_safe = np.where(db[:, 0] < 0, db[:, 0], -1.0)
        r3 = np.where(db[:, 0] < 0, -lb[:, 0] / d0_safe, np.inf)
        alpha = np.minimum.reduce([alpha, soc_alpha, r3])
    return alpha


class _BatchScaling:
    """Nesterov-Todd scaling for a batch of product-cone points."""

    def __init__(self, cone: ConeSpec, s: np.ndarray, z: np.ndarray):
        self.cone = cone
        nl = cone.nonneg
        B = s.shape[0]
        self.w_orth = np.sqrt(s[:, :nl] / z[:, :nl])
        self.soc_data = []
        lam = np.empty((B, cone.size))
        lam[:, :nl] = np.sqrt(s[:, :nl] * z[:, :nl])
        for sl in cone.soc_slices():
            sb, zb = s[:, sl], z[:, sl]
            a_s = sb[:, 0] ** 2 - np.einsum("bi,bi->b", sb[:, 1:], sb[:, 1:])
            a_z = zb[:, 0] ** 2 - np.einsum("bi,bi->b", zb[:, 1:], zb[:, 1:])
            a_s = np.maximum(a_s, 1e-300)
            a_z = np.maximum(a_z, 1e-300)
            sbar = sb / np.sqrt(a_s)[:, None]
            zbar = zb / np.sqrt(a_z)[:, None]
            gamma = np.sqrt(np.maximum((1.0 + np.einsum("bi,bi->b", sbar, zbar)) / 2.0, 1e-300))
            wbar = sbar.copy()
            wbar[:, 0] += zbar[:, 0]
            wbar[:, 1:] -= zbar[:, 1:]
            wbar /= 2.0 * gamma[:, None]
            # reflector uses the Jordan square root of the scaling point
            v = wbar.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * (wbar[:, 0] + 1.0))[:, None]
            eta = (a_s / a_z) ** 0.25
            self.soc_data.append((eta, v))
            lam[:, sl] = self._soc_mul(eta, v, zb)
        self.lam = lam

    @staticmethod
    def _soc_mul(eta: np.ndarray, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
        t = 2.0 * np.einsum("bi,bi->b", wbar, v)
        out = t[:, None] * wbar
        out[:, 0] -= v[:, 0]
        out[:, 1:] += v[:, 1:]
        return eta[:, None] * out

    @staticmethod
    def _soc_mul_inv(eta: np.ndarray, wbar: np.ndarray, v: np.ndarray) -> np.ndarray:
        jv = v.copy()
        jv[:, 1:] = -jv[:, 1:]
        t = 2.0 * np.einsum("bi,bi->b", wbar, jv)
        out = t[:, None] * wbar
        out[:, 1:] = -out[:, 1:]
        out[:, 0] -= jv[:, 0]
        out[:, 1:] -= jv[:, 1:]
        return out / eta[:, None]

    def mult_w(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.cone.nonneg
        out[:, :nl] = self.w_orth * v[:, :nl]
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            out[:, sl] = self._soc_mul(eta, wbar, v[:, sl])
        return out

    def mult_winv(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.cone.nonneg
        out[:, :nl] = v[:, :nl] / self.w_orth
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            out[:, sl] = self._soc_mul_inv(eta, wbar, v[:, sl])
        return out

    def winv_matrix(self, G: np.ndarray) -> np.ndarray:
        """W^-T applied to the constraint rows, per problem: (B, m, n).

        G may be one shared (m, n) block or a per-problem (B, m, n)
        stack; the arithmetic per problem is the same either way.
        """
        B = self.lam.shape[0]
        nl = self.cone.nonneg
        if G.ndim == 2:
            m, n = G.shape
            out = np.empty((B, m, n))
            out[:, :nl] = G[None, :nl] / self.w_orth[:, :, None]
            for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
                blk = G[sl].copy()
                blk[1:] = -blk[1:]
                t = 2.0 * np.einsum("bi,in->bn", wbar, blk)
                res = wbar[:, :, None] * t[:, None, :]
                res[:, 1:] = -res[:, 1:]
                res[:, 0] -= blk[0]
                res[:, 1:] -= blk[1:]
                out[:, sl] = res / eta[:, None, None]
            return out
        m, n = G.shape[1:]
        out = np.empty((B, m, n))
        out[:, :nl] = G[:, :nl] / self.w_orth[:, :, None]
        for (eta, wbar), sl in zip(self.soc_data, self.cone.soc_slices()):
            blk = G[:, sl].copy()
            blk[:, 1:] = -blk[:, 1:]
            t = 2.0 * np.einsum("bi,bin->bn", wbar, blk)
            res = wbar[:, :, None] * t[:, None, :]
            res[:, 1:] = -res[:, 1:]
            res[:, 0] -= blk[:, 0]
            res[:, 1:] -= blk[:, 1:]
            out[:, sl] = res / eta[:, None, None]
        return out


def solve_cone_qp_batch(
    P: np.ndarray,
    q: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    cone: ConeSpec,
    tol: float = 1e-8,
    max_iter: int = 60,
) -> tuple[np.ndarray, list[str]]:
    """Solve B small cone QPs sharing one cone layout.

    P is (B, n, n), q is (B, n); the cone is common to every problem.
    G may be one shared (m, n) block or a per-problem (B, m, n) stack,
    and h may be (m,) shared or (B, m) per problem.  Runs the same
    scaled predictor-corrector path as solve_cone_qp with every problem
    advanced in lockstep; converged or failed problems are frozen and
    removed from the working set, which leaves the remaining arithmetic
    bitwise-identical to solving them alone.  Returns the stacked
    solutions and one status string per problem ("optimal", "max_iter",
    or "numerical_failure").  Feasibility of every problem is the
    caller's responsibility; no infeasibility certificates here.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    B, n = q.shape
    m = cone.size
    per_g = G.ndim == 3
    if G.shape != ((B, m, n) if per_g else (m, n)):
        raise ValueError("constraint block shape mismatch")
    if h.ndim == 1:
        if len(h) != m:
            raise ValueError("constraint block shape mismatch")
        hb = np.broadcast_to(h, (B, m))
    elif h.shape == (B, m):
        hb = h
    else:
        raise ValueError("h must be (m,) or (B, m)")
    e = cone.identity()

    def bsolve(M, r):
        return np.linalg.solve(M, r[..., None])[..., 0]

    def gmul(Gc, v):
        if per_g:
            return np.einsum("bmi,bi->bm", Gc, v)
        return v @ Gc.T

    def gtmul(Gc, v):
        if per_g:
            return np.einsum("bmi,bm->bi", Gc, v)
        return v @ Gc

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if per_g:
            M0 = P + np.einsum("bmi,bmj->bij", G, G)
        else:
            M0 = P + (G.T @ G)[None]
        try:
            x = bsolve(M0, -q + gtmul(G, hb))
        except np.linalg.LinAlgError:
            x = bsolve(M0 + 1e-10 * np.eye(n)[None], -q + gtmul(G, hb))
        s_hat = hb - gmul(G, x)
        # mirror the scalar rule: shift by (1 - margin) only when not interior
        mrg = _b_margin(cone, s_hat)
        shift = np.where(mrg > 1e-6, 0.0, 1.0 - mrg)
        s = s_hat + shift[:, None] * e[None]
        z_hat = -s_hat
        mrg_z = _b_margin(cone, z_hat)
        shift_z = np.where(mrg_z > 1e-6, 0.0, 1.0 - mrg_z)
        z = z_hat + shift_z[:, None] * e[None]

        hnorm = 1.0 + np.linalg.norm(hb, axis=1)
        qnorm = 1.0 + np.linalg.norm(q, axis=1)

        x_out = x.copy()
        s_work, z_work = s, z
        status = np.full(B, "max_iter", dtype=object)
        idx = np.arange(B)  # active problem ids
        best_score = np.full(B, np.inf)
        best_x = x.copy()
        P_a, q_a, qn_a, h_a, hn_a = P, q, qnorm, hb, hnorm
        G_a = G

        for _ in range(max_iter):
            if len(idx) == 0:
                break
            Px = np.einsum("bij,bj->bi", P_a, x)
            rx = Px + q_a + gtmul(G_a, z_work)
            rz = gmul(G_a, x) + s_work - h_a
            gap = np.einsum("bi,bi->b", s_work, z_work)
            mu = gap / cone.degree
            pobj = 0.5 * np.einsum("bi,bi->b", x, Px) + np.einsum("bi,bi->b", q_a, x)
            pres = np.linalg.norm(rz, axis=1) / hn_a
            dres = np.linalg.norm(rx, axis=1) / qn_a
            relgap = gap / np.maximum(1.0, np.abs(pobj))
            score = pres + dres + relgap
            improve = score < best_score[idx]
            if np.any(improve):
                sub = idx[improve]
                best_score[sub] = score[improve]
                best_x[sub] = x[improve]
            done = (pres <= tol) & (dres <= tol) & (relgap <= tol)
            done |= (mu < 1e-16) & (pres < math.sqrt(tol))
            if np.any(done):
                sub = idx[done]
                status[sub] = "optimal"
                x_out[sub] = x[done]
                keep = ~done
                idx = idx[keep]
                x, s_work, z_work = x[keep], s_work[keep], z_work[keep]
                P_a, q_a, qn_a = P_a[keep], q_a[keep], qn_a[keep]
                h_a, hn_a = h_a[keep], hn_a[keep]
                if per_g:
                    G_a = G_a[keep]
                if len(idx) == 0:
                    break
                continue

            try:
                scal = _BatchScaling(cone, s_work, z_work)
                Gw = scal.winv_matrix(G_a)
                M = P_a + np.einsum("bri,brj->bij", Gw, Gw)
            except FloatingPointError:
                break
            lam = scal.lam

            def direction(ds_target):
                vs = _b_jdiv(cone, lam, ds_target)
                bz = scal.mult_winv(rz) + vs
                rhs = -rx - np.einsum("bri,br->bi", Gw, bz)
                try:
                    dx = bsolve(M, rhs)
                except np.linalg.LinAlgError:
                    return None
                dz_sc = np.einsum("bri,bi->br", Gw, dx) + bz
                ds_sc = vs - dz_sc
                return dx, dz_sc, ds_sc

            lam_lam = _b_jprod(cone, lam, lam)
            aff = direction(-lam_lam)
            if aff is None:
                break
            dx_a, dzs_a, dss_a = aff
            alpha_a = np.minimum(
                1.0,
                np.minimum(_b_max_step(cone, lam, dss_a), _b_max_step(cone, lam, dzs_a)),
            )
            s_a = s_work + alpha_a[:, None] * scal.mult_w(dss_a)
            z_a = z_work + alpha_a[:, None] * scal.mult_winv(dzs_a)
            gap_a = np.maximum(np.einsum("bi,bi->b", s_a, z_a), 0.0)
            gap_safe = np.where(gap > 0, gap, 1.0)
            sigma = np.where(gap > 0, np.clip((gap_a / gap_safe) ** 3, 0.0, 1.0), 0.0)
            gamma = _b_jprod(cone, dss_a, dzs_a)
            ds_target = sigma[:, None] * mu[:, None] * e[None] - lam_lam - gamma
            comb = direction(ds_target)
            if comb is None:
                break
            dx, dzs, dss = comb
            alpha = np.minimum(
                1.0,
                _STEP_FRAC
                * np.minimum(_b_max_step(cone, lam, dss), _b_max_step(cone, lam, dzs)),
            )
            bad = ~np.isfinite(alpha) | (alpha <= 1e-14)
            x_new = x + alpha[:, None] * dx
            z_new = z_work + alpha[:, None] * scal.mult_winv(dzs)
            s_new = s_work + alpha[:, None] * scal.mult_w(dss)
            bad |= ~(
                np.all(np.isfinite(x_new), axis=1)
                & np.all(np.isfinite(z_new), axis=1)
                & np.all(np.isfinite(s_new), axis=1)
            )
            if np.any(bad):
                sub = idx[bad]
                status[sub] = "numerical_failure"
                x_out[sub] = best_x[sub]
                keep = ~bad
                idx = idx[keep]
                x, s_work, z_work = x_new[keep], s_new[keep], z_new[keep]
                P_a, q_a, qn_a = P_a[keep], q_a[keep], qn_a[keep]
                h_a, hn_a = h_a[keep], hn_a[keep]
                if per_g:
                    G_a = G_a[keep]
            else:
                x, s_work, z_work = x_new, s_new, z_new

        if len(idx):
            x_out[idx] = best_x[idx]
    return x_out, list(status)
