"""Convex quadratic programming with verified KKT residuals.

Canonical form:

    minimize    0.5 z'Hz + g'z
    subject to  A_eq z = b_eq,   lb <= z <= ub

General polyhedral rows are expressed by slack augmentation (see
``with_row_ranges``). The solver is a Mehrotra predictor-corrector
interior-point method followed by an active-set polish step; it accepts dense
or scipy.sparse matrices and is fully deterministic.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve, lstsq

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITER_LIMIT = "iter_limit"


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)

    def within(self, tol: float) -> bool:
        return self.max() <= tol


@dataclass(frozen=True)
class QuadraticProgram:
    """Problem data; ``h`` and ``a_eq`` may be ndarray or scipy.sparse."""

    h: object
    g: np.ndarray
    a_eq: object
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self) -> None:
        d = self.dim
        if self.g.shape != (d,):
            raise ValueError("g dimension mismatch")
        if self.lb.shape != (d,) or self.ub.shape != (d,):
            raise ValueError("bound dimension mismatch")
        if np.any(self.lb > self.ub):
            raise ValueError("lb exceeds ub")
        m = self.n_eq
        if self.b_eq.shape != (m,):
            raise ValueError("b_eq dimension mismatch")
        if self.a_eq is not None and _shape(self.a_eq)[1] != d:
            raise ValueError("a_eq column mismatch")
        gap = _sym_gap(self.h)
        if gap > 1e-12 * max(1.0, _inf_norm(self.h)):
            raise ValueError("H must be symmetric")

    @property
    def dim(self) -> int:
        return _shape(self.h)[0]

    @property
    def n_eq(self) -> int:
        return 0 if self.a_eq is None else _shape(self.a_eq)[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.h @ z) + self.g @ z)


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    objective: float
    eq_duals: np.ndarray
    bound_duals: np.ndarray  # signed: positive at lower bounds, negative at upper
    status: QpStatus
    iterations: int
    residuals: KktResiduals


def _shape(mat) -> tuple[int, int]:
    return mat.shape


def _inf_norm(mat) -> float:
    if sp.issparse(mat):
        return float(abs(mat).sum(axis=1).max()) if mat.nnz else 0.0
    return float(np.max(np.sum(np.abs(mat), axis=1))) if mat.size else 0.0


def _sym_gap(mat) -> float:
    if sp.issparse(mat):
        diff = (mat - mat.T).tocoo()
        return float(np.max(np.abs(diff.data))) if diff.nnz else 0.0
    return float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0


def make_qp(
    h,
    g,
    a_eq=None,
    b_eq=None,
    lb=None,
    ub=None,
) -> QuadraticProgram:
    """Convenience constructor filling in absent constraints."""
    g = np.asarray(g, dtype=float)
    d = len(g)
    if not sp.issparse(h):
        h = np.asarray(h, dtype=float)
    if a_eq is not None and not sp.issparse(a_eq):
        a_eq = np.asarray(a_eq, dtype=float)
        if a_eq.size == 0:
            a_eq = None
    b_eq = np.zeros(0) if a_eq is None else np.asarray(b_eq, dtype=float)
    lb = np.full(d, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(d, np.inf) if ub is None else np.asarray(ub, dtype=float)
    return QuadraticProgram(h=h, g=g, a_eq=a_eq, b_eq=b_eq, lb=lb, ub=ub)


def with_row_ranges(
    h,
    g,
    rows,
    row_lb,
    row_ub,
    lb=None,
    ub=None,
    a_eq=None,
    b_eq=None,
) -> QuadraticProgram:
    """Augment ranged rows ``row_lb <= rows @ z <= row_ub`` with slack variables.

    The returned program's decision vector is [z; sigma] with equality rows
    ``rows @ z - sigma = 0`` and box bounds on sigma; the caller slices the
    solution back to the original dimension.
    """
    g = np.asarray(g, dtype=float)
    d = len(g)
    rows = rows if sp.issparse(rows) else np.asarray(rows, dtype=float)
    m = _shape(rows)[0]
    sparse = sp.issparse(rows) or sp.issparse(h) or (a_eq is not None and sp.issparse(a_eq))
    if sparse:
        h_aug = sp.block_diag(
            [h if sp.issparse(h) else sp.csc_matrix(np.atleast_2d(h)), sp.csc_matrix((m, m))],
            format="csc",
        )
        link = sp.hstack([rows, -sp.identity(m, format="csc")], format="csc")
        if a_eq is not None:
            top = sp.hstack(
                [a_eq if sp.issparse(a_eq) else sp.csc_matrix(a_eq), sp.csc_matrix((_shape(a_eq)[0], m))],
                format="csc",
            )
            a_full = sp.vstack([top, link], format="csc")
            b_full = np.concatenate([np.asarray(b_eq, dtype=float), np.zeros(m)])
        else:
            a_full, b_full = link, np.zeros(m)
    else:
        h_aug = np.zeros((d + m, d + m))
        h_aug[:d, :d] = h
        link = np.hstack([rows, -np.eye(m)])
        if a_eq is not None:
            a_eq = np.asarray(a_eq, dtype=float)
            top = np.hstack([a_eq, np.zeros((a_eq.shape[0], m))])
            a_full = np.vstack([top, link])
            b_full = np.concatenate([np.asarray(b_eq, dtype=float), np.zeros(m)])
        else:
            a_full, b_full = link, np.zeros(m)
    lb = np.full(d, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(d, np.inf) if ub is None else np.asarray(ub, dtype=float)
    return make_qp(
        h_aug,
        np.concatenate([g, np.zeros(m)]),
        a_eq=a_full,
        b_eq=b_full,
        lb=np.concatenate([lb, np.asarray(row_lb, dtype=float)]),
        ub=np.concatenate([ub, np.asarray(row_ub, dtype=float)]),
    )


def kkt_residuals(
    qp: QuadraticProgram, z: np.ndarray, eq_duals: np.ndarray, bound_duals: np.ndarray
) -> KktResiduals:
    """Stationarity, primal violation and complementarity gap at (z, duals).

    ``bound_duals`` is the signed multiplier: positive entries act on the
    lower bound, negative on the upper.
    """
    stat = qp.h @ z + qp.g - bound_duals
    if qp.n_eq:
        stat = stat + qp.a_eq.T @ eq_duals
    stationarity = float(np.max(np.abs(stat))) if len(stat) else 0.0

    primal = 0.0
    if qp.n_eq:
        primal = float(np.max(np.abs(qp.a_eq @ z - qp.b_eq)))
    primal = max(primal, float(np.max(qp.lb - z, initial=0.0)))
    primal = max(primal, float(np.max(z - qp.ub, initial=0.0)))

    comp = 0.0
    for i, mu in enumerate(bound_duals):
        if mu > 0.0:
            dist = z[i] - qp.lb[i]
        elif mu < 0.0:
            dist = qp.ub[i] - z[i]
        else:
            continue
        comp = max(comp, abs(mu) if not math.isfinite(dist) else abs(mu * dist))
    return KktResiduals(stationarity=stationarity, primal=primal, complementarity=comp)


class _KktSystem:
    """Factor [[H + D, A'], [A, 0]] and solve for multiple right-hand sides.

    Sparse systems get a tiny primal-dual regularization plus iterative
    refinement; dense systems use plain LU.
    """

    def __init__(self, qp: QuadraticProgram, d_diag: np.ndarray) -> None:
        self.qp = qp
        d = qp.dim
        m = qp.n_eq
        self.split = d
        if sp.issparse(qp.h) or sp.issparse(qp.a_eq):
            h_block = (qp.h if sp.issparse(qp.h) else sp.csc_matrix(qp.h)) + sp.diags(d_diag)
            reg = 1e-11 * max(1.0, _inf_norm(qp.h))
            if m:
                a_block = qp.a_eq if sp.issparse(qp.a_eq) else sp.csc_matrix(qp.a_eq)
                kkt = sp.bmat(
                    [
                        [h_block + reg * sp.identity(d), a_block.T],
                        [a_block, -reg * sp.identity(m)],
                    ],
                    format="csc",
                )
                self._exact = sp.bmat([[h_block, a_block.T], [a_block, None]], format="csc")
            else:
                kkt = (h_block + reg * sp.identity(d)).tocsc()
                self._exact = h_block.tocsc()
            self._lu = spla.splu(kkt)
            self._solve_raw = self._lu.solve
            self._refine = True
        else:
            h_block = qp.h + np.diag(d_diag)
            if m:
                kkt = np.zeros((d + m, d + m))
                kkt[:d, :d] = h_block
                kkt[:d, d:] = qp.a_eq.T
                kkt[d:, :d] = qp.a_eq
            else:
                kkt = h_block
            self._exact = kkt
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", LinAlgWarning)
                    fact = lu_factor(kkt)
            except np.linalg.LinAlgError:
                fact = None

            def dense_solve(rhs, kkt=kkt, fact=fact):
                if fact is not None:
                    sol = lu_solve(fact, rhs)
                    if np.all(np.isfinite(sol)):
                        return sol
                return lstsq(kkt, rhs, lapack_driver="gelsd")[0]

            self._solve_raw = dense_solve
            self._refine = False

    def solve(self, rhs_z: np.ndarray, rhs_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rhs = np.concatenate([rhs_z, rhs_y]) if len(rhs_y) else rhs_z
        sol = self._solve_raw(rhs)
        if self._refine:
            for _ in range(5):
                resid = rhs - self._exact @ sol
                if np.max(np.abs(resid)) < 1e-13 * (1.0 + np.max(np.abs(rhs))):
                    break
                sol = sol + self._solve_raw(resid)
        return sol[: self.split], sol[self.split :]


def _initial_point(qp: QuadraticProgram, warm: np.ndarray | None) -> np.ndarray:
    lb, ub = qp.lb, qp.ub
    z = np.zeros(qp.dim) if warm is None else np.array(warm, dtype=float)
    span = np.where(np.isfinite(lb) & np.isfinite(ub), ub - lb, 2.0)
    margin = np.minimum(0.49 * span, 1e-2 * (1.0 + span))
    lo_ok = np.isfinite(lb)
    hi_ok = np.isfinite(ub)
    if warm is None:
        both = lo_ok & hi_ok
        z[both] = 0.5 * (lb[both] + ub[both])
        z[lo_ok & ~hi_ok] = lb[lo_ok & ~hi_ok] + 1.0
        z[hi_ok & ~lo_ok] = ub[hi_ok & ~lo_ok] - 1.0
    z[lo_ok] = np.maximum(z[lo_ok], (lb + margin)[lo_ok])
    z[hi_ok] = np.minimum(z[hi_ok], (ub - margin)[hi_ok])
    return z


def _max_step(current: np.ndarray, delta: np.ndarray, tau: float) -> float:
    shrink = delta < 0.0
    if not np.any(shrink):
        return 1.0
    return float(min(1.0, tau * np.min(-current[shrink] / delta[shrink])))


def solve_qp(
    qp: QuadraticProgram,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: np.ndarray | None = None,
) -> QpSolution:
    """Solve the QP to the KKT-residual tolerance.

    Returns status OPTIMAL only when the polished residuals meet ``tol``;
    conflicting constraints yield INFEASIBLE, and exhausting ``max_iter``
    yields ITER_LIMIT with the best iterate and its residuals.
    """
    d = qp.dim
    lb = qp.lb.copy()
    ub = qp.ub.copy()

    # pinned variables (lb == ub) become equality rows so slacks stay positive
    pinned = np.where(lb == ub)[0]
    if len(pinned):
        extra = sp.csc_matrix(
            (np.ones(len(pinned)), (np.arange(len(pinned)), pinned)), shape=(len(pinned), d)
        )
        if not sp.issparse(qp.h) and (qp.n_eq == 0 or not sp.issparse(qp.a_eq)):
            extra = extra.toarray()
        if qp.n_eq:
            a_new = (
                sp.vstack([sp.csc_matrix(qp.a_eq), sp.csc_matrix(extra)], format="csc")
                if (sp.issparse(qp.a_eq) or sp.issparse(extra))
                else np.vstack([qp.a_eq, extra])
            )
            b_new = np.concatenate([qp.b_eq, lb[pinned]])
        else:
            a_new = extra
            b_new = lb[pinned]
        lb2 = lb.copy()
        ub2 = ub.copy()
        lb2[pinned] = -np.inf
        ub2[pinned] = np.inf
        inner = QuadraticProgram(h=qp.h, g=qp.g, a_eq=a_new, b_eq=b_new, lb=lb2, ub=ub2)
        sol = solve_qp(inner, tol=tol, max_iter=max_iter, warm_start=warm_start)
        mu = sol.bound_duals.copy()
        mu[pinned] = -sol.eq_duals[qp.n_eq :]
        eq_duals = sol.eq_duals[: qp.n_eq]
        res = kkt_residuals(qp, sol.z, eq_duals, mu)
        return QpSolution(
            z=sol.z,
            objective=sol.objective,
            eq_duals=eq_duals,
            bound_duals=mu,
            status=sol.status,
            iterations=sol.iterations,
            residuals=res,
        )

    lo_idx = np.where(np.isfinite(lb))[0]
    hi_idx = np.where(np.isfinite(ub))[0]
    n_slack = len(lo_idx) + len(hi_idx)

    g_scale = 1.0 + float(np.max(np.abs(qp.g), initial=0.0))
    b_scale = 1.0 + float(np.max(np.abs(qp.b_eq), initial=0.0))

    if n_slack == 0:
        return _solve_equality_only(qp, tol, g_scale, b_scale)

    z = _initial_point(qp, warm_start)
    y = np.zeros(qp.n_eq)
    lam_l = np.ones(len(lo_idx))
    lam_u = np.ones(len(hi_idx))

    status = QpStatus.ITER_LIMIT
    iterations = 0
    best_merit = np.inf
    stall = 0
    for iterations in range(1, max_iter + 1):
        s_floor_l = 1e-14 * (1.0 + np.abs(lb[lo_idx]))
        s_floor_u = 1e-14 * (1.0 + np.abs(ub[hi_idx]))
        s_l = np.maximum(z[lo_idx] - lb[lo_idx], s_floor_l)
        s_u = np.maximum(ub[hi_idx] - z[hi_idx], s_floor_u)
        mu_signed = np.zeros(d)
        np.add.at(mu_signed, lo_idx, lam_l)
        np.add.at(mu_signed, hi_idx, -lam_u)

        r_d = qp.h @ z + qp.g - mu_signed
        if qp.n_eq:
            r_d = r_d + qp.a_eq.T @ y
            r_p = qp.a_eq @ z - qp.b_eq
        else:
            r_p = np.zeros(0)
        gap = (s_l @ lam_l + s_u @ lam_u) / n_slack

        stat_ok = np.max(np.abs(r_d)) <= tol * g_scale
        prim_ok = (np.max(np.abs(r_p)) if len(r_p) else 0.0) <= tol * b_scale
        if stat_ok and prim_ok and gap <= tol:
            status = QpStatus.OPTIMAL
            break

        if max(np.abs(lam_l).max(initial=0.0), np.abs(lam_u).max(initial=0.0)) > 1e14:
            status = QpStatus.INFEASIBLE
            break

        # stalled progress means the problem is numerically stuck or infeasible
        merit = (
            np.max(np.abs(r_d)) / g_scale
            + (np.max(np.abs(r_p)) / b_scale if len(r_p) else 0.0)
            + gap
        )
        if merit < best_merit * (1.0 - 1e-6):
            best_merit = merit
            stall = 0
        else:
            stall += 1
            if stall >= 30:
                break

        d_diag = np.zeros(d)
        np.add.at(d_diag, lo_idx, lam_l / s_l)
        np.add.at(d_diag, hi_idx, lam_u / s_u)
        system = _KktSystem(qp, d_diag)

        # affine predictor
        rhs_z = -r_d - mu_signed_scatter(d, lo_idx, lam_l, hi_idx, lam_u)
        dz_aff, dy_aff = system.solve(rhs_z, -r_p)
        dlam_l_aff = -lam_l + (-lam_l / s_l) * dz_aff[lo_idx]
        dlam_u_aff = -lam_u + (lam_u / s_u) * dz_aff[hi_idx]
        ds_l_aff = dz_aff[lo_idx]
        ds_u_aff = -dz_aff[hi_idx]

        alpha_p = min(_max_step(s_l, ds_l_aff, 1.0), _max_step(s_u, ds_u_aff, 1.0))
        alpha_d = min(_max_step(lam_l, dlam_l_aff, 1.0), _max_step(lam_u, dlam_u_aff, 1.0))
        gap_aff = (
            (s_l + alpha_p * ds_l_aff) @ (lam_l + alpha_d * dlam_l_aff)
            + (s_u + alpha_p * ds_u_aff) @ (lam_u + alpha_d * dlam_u_aff)
        ) / n_slack
        sigma = (max(gap_aff, 0.0) / gap) ** 3 if gap > 0.0 else 0.0

        # corrector with Mehrotra centering
        target = sigma * gap
        scatter = np.zeros(d)
        np.add.at(scatter, lo_idx, lam_l - (target - ds_l_aff * dlam_l_aff) / s_l)
        np.add.at(scatter, hi_idx, -lam_u + (target - ds_u_aff * dlam_u_aff) / s_u)
        rhs_z = -r_d - scatter
        dz, dy = system.solve(rhs_z, -r_p)
        dlam_l = -lam_l + (target - ds_l_aff * dlam_l_aff) / s_l - (lam_l / s_l) * dz[lo_idx]
        dlam_u = -lam_u + (target - ds_u_aff * dlam_u_aff) / s_u + (lam_u / s_u) * dz[hi_idx]
        ds_l = dz[lo_idx]
        ds_u = -dz[hi_idx]

        tau = 0.995 if gap > 1e-6 else 0.99995
        alpha_p = min(_max_step(s_l, ds_l, tau), _max_step(s_u, ds_u, tau))
        alpha_d = min(_max_step(lam_l, dlam_l, tau), _max_step(lam_u, dlam_u, tau))
        z = z + alpha_p * dz
        if qp.n_eq:
            y = y + alpha_d * dy
        lam_l = lam_l + alpha_d * dlam_l
        lam_u = lam_u + alpha_d * dlam_u

    mu_signed = np.zeros(d)
    np.add.at(mu_signed, lo_idx, lam_l)
    np.add.at(mu_signed, hi_idx, -lam_u)
    res = kkt_residuals(qp, z, y, mu_signed)

    z, y, mu_signed, res = _polish(qp, z, y, mu_signed, res, tol, lo_idx, hi_idx)

    if status is QpStatus.OPTIMAL and not res.within(tol * max(g_scale, b_scale)):
        status = QpStatus.ITER_LIMIT
    if status is QpStatus.ITER_LIMIT and res.primal > max(1e-6, 1e3 * tol) * b_scale:
        status = QpStatus.INFEASIBLE

    return QpSolution(
        z=z,
        objective=qp.objective(z),
        eq_duals=y,
        bound_duals=mu_signed,
        status=status,
        iterations=iterations,
        residuals=res,
    )


def mu_signed_scatter(d, lo_idx, lam_l, hi_idx, lam_u) -> np.ndarray:
    out = np.zeros(d)
    np.add.at(out, lo_idx, lam_l)
    np.add.at(out, hi_idx, -lam_u)
    return out


def _solve_equality_only(
    qp: QuadraticProgram, tol: float, g_scale: float, b_scale: float
) -> QpSolution:
    system = _KktSystem(qp, np.zeros(qp.dim))
    z, y = system.solve(-qp.g, qp.b_eq.copy())
    res = kkt_residuals(qp, z, y, np.zeros(qp.dim))
    ok = res.stationarity <= tol * g_scale and res.primal <= tol * b_scale
    return QpSolution(
        z=z,
        objective=qp.objective(z),
        eq_duals=y,
        bound_duals=np.zeros(qp.dim),
        status=QpStatus.OPTIMAL if ok else QpStatus.INFEASIBLE,
        iterations=1,
        residuals=res,
    )


def _polish(
    qp: QuadraticProgram,
    z: np.ndarray,
    y: np.ndarray,
    mu_signed: np.ndarray,
    res: KktResiduals,
    tol: float,
    lo_idx: np.ndarray,
    hi_idx: np.ndarray,
):
    """Pin the identified active bounds and re-solve the equality KKT system."""
    d = qp.dim
    s_l = z[lo_idx] - qp.lb[lo_idx]
    s_u = qp.ub[hi_idx] - z[hi_idx]
    lam_l = np.maximum(mu_signed[lo_idx], 0.0)
    lam_u = np.maximum(-mu_signed[hi_idx], 0.0)
    act_l = lo_idx[(lam_l >= s_l) | (s_l <= 1e-11 * (1.0 + np.abs(qp.lb[lo_idx])))]
    act_u = hi_idx[(lam_u > s_u) | (s_u <= 1e-11 * (1.0 + np.abs(qp.ub[hi_idx])))]
    act_u = np.setdiff1d(act_u, act_l)
    n_act = len(act_l) + len(act_u)
    rows = np.concatenate([act_l, act_u]).astype(int)
    vals = np.concatenate([qp.lb[act_l], qp.ub[act_u]])
    sparse = sp.issparse(qp.h) or sp.issparse(qp.a_eq)
    if sparse:
        pin = sp.csc_matrix((np.ones(n_act), (np.arange(n_act), rows)), shape=(n_act, d))
        a_all = (
            sp.vstack([sp.csc_matrix(qp.a_eq), pin], format="csc") if qp.n_eq else pin
        )
    else:
        pin = np.zeros((n_act, d))
        pin[np.arange(n_act), rows] = 1.0
        a_all = np.vstack([qp.a_eq, pin]) if qp.n_eq else pin
    b_all = np.concatenate([qp.b_eq, vals])

    eq_qp = QuadraticProgram(
        h=qp.h,
        g=qp.g,
        a_eq=a_all,
        b_eq=b_all,
        lb=np.full(d, -np.inf),
        ub=np.full(d, np.inf),
    )
    try:
        system = _KktSystem(eq_qp, np.zeros(d))
        z_p, duals = system.solve(-qp.g, b_all.copy())
    except (RuntimeError, np.linalg.LinAlgError):
        return z, y, mu_signed, res

    y_p = duals[: qp.n_eq]
    pin_duals = duals[qp.n_eq :]
    mu_p = np.zeros(d)
    mu_p[act_l] = -pin_duals[: len(act_l)]
    mu_p[act_u] = -pin_duals[len(act_l) :]

    # verify: feasibility of inactive bounds and correct dual signs
    feas_tol = max(tol, 1e-9) * (1.0 + float(np.max(np.abs(z_p), initial=0.0)))
    if np.any(z_p < qp.lb - feas_tol) or np.any(z_p > qp.ub + feas_tol):
        return z, y, mu_signed, res
    if np.any(mu_p[act_l] < -feas_tol) or np.any(mu_p[act_u] > feas_tol):
        return z, y, mu_signed, res
    z_c = np.clip(z_p, qp.lb, qp.ub)
    res_p = kkt_residuals(qp, z_c, y_p, mu_p)
    if res_p.max() <= res.max():
        return z_c, y_p, mu_p, res_p
    return z, y, mu_signed, res
