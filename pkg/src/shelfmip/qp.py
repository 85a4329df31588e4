"""Operator-splitting solver for convex QPs.

Solves ``min 0.5 x'Px + q'x  s.t.  l <= Ax <= u`` with the ADMM iteration
popularised by OSQP: a regularized linear system per iteration, projection
onto the box, over-relaxation, Ruiz equilibration, periodic penalty
rebalancing, infeasibility certificates from successive dual differences,
and an active-set polish of the final iterate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .program import ConvexProgram, MibpProgram, ProgramError

log = logging.getLogger(__name__)

OPTIMAL = "Optimal"
PRIMAL_INFEASIBLE = "PrimalInfeasible"
MAX_ITERATIONS = "MaxIterations"

INF = 1e20  # bounds beyond this are treated as infinite


class NonConvexInput(ProgramError):
    pass


@dataclass
class QpData:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    const: float = 0.0

    @property
    def n(self) -> int:
        return len(self.q)

    @property
    def m(self) -> int:
        return len(self.l)


@dataclass
class QpSettings:
    rho: float = 1.0
    sigma: float = 1e-6
    alpha: float = 1.6
    eq_scale: float = 1e3
    max_iter: int = 4000
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    eps_pinf: float = 1e-5
    check_every: int = 25
    rho_every: int = 50
    rho_tolerance: float = 5.0
    scaling_iters: int = 10
    polish: bool = True
    polish_refine: int = 3
    dense_limit: int = 2500


@dataclass
class QpResult:
    status: str
    x: np.ndarray
    y: np.ndarray
    objective: float
    iterations: int
    prim_res: float
    dual_res: float
    certificate: Optional[np.ndarray] = None
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def qp_data(program) -> QpData:
    """QP data of a linear-constrained program; binaries are relaxed to their bounds.

    Variable bounds become identity rows appended after the constraint rows.
    """
    if isinstance(program, ConvexProgram):
        program = program.program
    if not isinstance(program, MibpProgram):
        raise TypeError("expected a MibpProgram or ConvexProgram")
    low = program.lowered
    rows = low.rows
    if len(rows.bil_row):
        raise NonConvexInput("quadratic constraint rows are not supported")
    n, m = program.n, low.m
    A1 = sp.csr_matrix((rows.val, rows.idx, rows.indptr), shape=(m, n))
    l1 = np.where(low.is_eq, rows.rhs, -np.inf)
    u1 = rows.rhs.copy()
    A = sp.vstack([A1, sp.identity(n, format="csr")]).tocsc()
    l = np.concatenate([l1, low.lo])
    u = np.concatenate([u1, low.hi])
    return QpData(low.P.tocsc(), low.q.copy(), A, l, u, low.const)


def _check_psd(P):
    if P.nnz == 0:
        return
    d = P.diagonal()
    off = P - sp.diags(d)
    if off.count_nonzero() == 0:
        if d.min() < -1e-12 * max(1.0, abs(d).max()):
            raise NonConvexInput("objective is not convex")
        return
    sym = 0.5 * (P + P.T)
    if P.shape[0] <= 2000:
        ev = np.linalg.eigvalsh(sym.toarray())
        if ev.min() < -1e-9 * max(1.0, abs(ev).max()):
            raise NonConvexInput("objective is not convex")


class QpWorkspace:
    """Scaled problem plus cached factorizations; bounds may change between solves."""

    def __init__(self, data: QpData, settings: QpSettings = None):
        self.settings = settings or QpSettings()
        self.data = data
        _check_psd(data.P)
        self._scale()
        l, u = data.l, data.u
        self.eq = np.isfinite(l) & np.isfinite(u) & (np.abs(u - l) < 1e-12 * np.maximum(1.0, np.abs(l)))
        self._factor_cache: dict = {}
        self._empty_rows = np.diff(self.A.tocsr().indptr) == 0

    # --- scaling
    def _scale(self):
        st = self.settings
        P = self.data.P.tocsc().astype(float)
        A = self.data.A.tocsc().astype(float)
        q = self.data.q.astype(float)
        n, m = P.shape[0], A.shape[0]
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        Ps, As, qs = P.copy(), A.copy(), q.copy()
        for _ in range(st.scaling_iters):
            colP = np.asarray(abs(Ps).max(axis=0).todense()).ravel() if Ps.nnz else np.zeros(n)
            colA = np.asarray(abs(As).max(axis=0).todense()).ravel() if As.nnz else np.zeros(n)
            rowA = np.asarray(abs(As).max(axis=1).todense()).ravel() if As.nnz else np.zeros(m)
            dn = np.maximum(colP, colA)
            dn = np.where(dn < 1e-4, 1.0, dn)
            dm = np.where(rowA < 1e-4, 1.0, rowA)
            dn = 1.0 / np.sqrt(np.clip(dn, 1e-4, 1e4))
            dm = 1.0 / np.sqrt(np.clip(dm, 1e-4, 1e4))
            Dd, Ed = sp.diags(dn), sp.diags(dm)
            Ps = (Dd @ Ps @ Dd).tocsc()
            As = (Ed @ As @ Dd).tocsc()
            qs = dn * qs
            D *= dn
            E *= dm
            # cost scaling
            mean_col = np.mean(np.asarray(abs(Ps).max(axis=0).todense()).ravel()) if Ps.nnz else 0.0
            gamma = 1.0 / np.clip(max(mean_col, np.abs(qs).max(initial=0.0)), 1e-4, 1e4)
            if max(mean_col, np.abs(qs).max(initial=0.0)) < 1e-4:
                gamma = 1.0
            Ps = gamma * Ps
            qs = gamma * qs
            c *= gamma
        self.P, self.A, self.q = Ps.tocsc(), As.tocsc(), qs
        self.AT = self.A.T.tocsc()
        self.D, self.E, self.c = D, E, c

    def _bounds(self, l, u):
        ls = np.where(np.isfinite(l), l * self.E, -np.inf)
        us = np.where(np.isfinite(u), u * self.E, np.inf)
        ls = np.where(ls < -INF, -np.inf, ls)
        us = np.where(us > INF, np.inf, us)
        return ls, us

    # --- linear system
    def _rho_vec(self, rho):
        return np.where(self.eq, rho * self.settings.eq_scale, rho)

    def _factor(self, rho):
        key = float(rho)
        f = self._factor_cache.get(key)
        if f is not None:
            return f
        st = self.settings
        rv = self._rho_vec(rho)
        K = self.P + st.sigma * sp.identity(self.P.shape[0], format="csc") + (self.AT @ sp.diags(rv) @ self.A)
        if K.shape[0] <= st.dense_limit:
            cf = la.cho_factor(K.toarray(), lower=False, check_finite=False)
            f = ("dense", cf, rv)
        else:
            f = ("sparse", spla.splu(K.tocsc()), rv)
        if len(self._factor_cache) > 8:
            self._factor_cache.clear()
        self._factor_cache[key] = f
        return f

    @staticmethod
    def _lin_solve(f, b):
        if f[0] == "dense":
            return la.cho_solve(f[1], b, check_finite=False)
        return f[1].solve(b)

    # --- main loop
    def solve(self, l=None, u=None, warm_x=None, warm_y=None, max_iter=None) -> QpResult:
        st = self.settings
        data = self.data
        l = data.l if l is None else np.asarray(l, dtype=float)
        u = data.u if u is None else np.asarray(u, dtype=float)
        max_iter = st.max_iter if max_iter is None else int(max_iter)
        n, m = data.n, data.m

        bad = (l > u + 1e-12)
        bad |= self._empty_rows & ((l > 1e-12) | (u < -1e-12))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            cert = np.zeros(m)
            cert[k] = -1.0 if u[k] < max(l[k], 0.0) else 1.0
            if not self._empty_rows[k]:
                cert = None
            return QpResult(PRIMAL_INFEASIBLE, np.zeros(n), np.zeros(m), math.inf, 0, math.inf, math.inf, cert)

        ls, us = self._bounds(l, u)
        D, E, c = self.D, self.E, self.c
        x = np.zeros(n) if warm_x is None else np.asarray(warm_x, dtype=float) / D
        y = np.zeros(m) if warm_y is None else np.asarray(warm_y, dtype=float) / E * c
        z = np.clip(self.A @ x, ls, us)
        rho = st.rho
        f = self._factor(rho)
        rv = f[2]
        alpha, sigma = st.alpha, st.sigma
        status = MAX_ITERATIONS
        it = 0
        prim = dual = math.inf
        cert = None
        interval = st.rho_every
        next_balance = interval
        for it in range(1, max_iter + 1):
            rhs = sigma * x - self.q + self.AT @ (rv * z - y)
            xt = self._lin_solve(f, rhs)
            zt = self.A @ xt
            x_new = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z_new = np.clip(zr + y / rv, ls, us)
            y_new = y + rv * (zr - z_new)
            dy = y_new - y
            x, z, y = x_new, z_new, y_new

            check = it % st.check_every == 0 or it == max_iter
            balance = it == next_balance
            if not (check or balance):
                continue
            prim, dual, ep, ed, scales = self._residuals(x, z, y)
            if prim <= ep and dual <= ed:
                status = OPTIMAL
                break
            if check and self._primal_infeasible(dy, ls, us):
                status = PRIMAL_INFEASIBLE
                cert = dy * self.E / max(np.abs(dy * self.E).max(), 1e-300)
                break
            if balance:
                next_balance = it + interval
                num = prim / max(scales[0], 1e-12)
                den = dual / max(scales[1], 1e-12)
                new_rho = float(np.clip(rho * math.sqrt(num / max(den, 1e-12)), 1e-6, 1e6))
                if new_rho > rho * st.rho_tolerance or new_rho < rho / st.rho_tolerance:
                    rho = new_rho
                    f = self._factor(rho)
                    rv = f[2]
                    # back off so rho cannot oscillate forever
                    interval *= 2
                    next_balance = it + interval

        xs, ys = D * x, E * y / c
        res = self._result(status, xs, ys, it, cert)
        if status == OPTIMAL and st.polish:
            pol = self._polish(res, l, u)
            if pol is not None:
                return pol
        if status == MAX_ITERATIONS and st.polish:
            # a slow tail is common on degenerate problems; the active-set
            # guess is accepted only if it meets the stopping tolerances
            pol = self._polish(res, l, u)
            if pol is not None and self._meets_tolerance(pol):
                return pol
        return res

    def _meets_tolerance(self, res: QpResult) -> bool:
        data, st = self.data, self.settings
        Ax = data.A @ res.x
        zc = np.clip(Ax, data.l, data.u)
        ep = st.eps_abs + st.eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(zc).max(initial=0.0))
        ed = st.eps_abs + st.eps_rel * max(np.abs(data.P @ res.x).max(initial=0.0),
                                           np.abs(data.A.T @ res.y).max(initial=0.0),
                                           np.abs(data.q).max(initial=0.0))
        return res.prim_res <= ep and res.dual_res <= ed

    def _residuals(self, x, z, y):
        """Unscaled residuals and tolerances."""
        D, E, c = self.D, self.E, self.c
        Ax = self.A @ x
        Px = self.P @ x
        ATy = self.AT @ y
        prim = np.abs((Ax - z) / E).max(initial=0.0)
        dual = np.abs((Px + self.q + ATy) / D).max(initial=0.0) / c
        nax = max(np.abs(Ax / E).max(initial=0.0), np.abs(z / E).max(initial=0.0))
        ndual = max(np.abs(Px / D).max(initial=0.0), np.abs(ATy / D).max(initial=0.0),
                    np.abs(self.q / D).max(initial=0.0)) / c
        st = self.settings
        return prim, dual, st.eps_abs + st.eps_rel * nax, st.eps_abs + st.eps_rel * ndual, (nax, ndual)

    def _primal_infeasible(self, dy, ls, us) -> bool:
        Ed = self.E * dy
        nrm = np.abs(Ed).max(initial=0.0)
        if nrm < 1e-10:
            return False
        eps = self.settings.eps_pinf * nrm
        if np.abs((self.AT @ dy) / self.D).max(initial=0.0) > eps:
            return False
        pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
        # infinite bounds need the matching component to vanish
        if np.any((pos > eps) & ~np.isfinite(us)) or np.any((neg < -eps) & ~np.isfinite(ls)):
            return False
        val = np.sum(np.where(np.isfinite(us), us, 0.0) * pos) + np.sum(np.where(np.isfinite(ls), ls, 0.0) * neg)
        return val < -eps

    def _result(self, status, x, y, it, cert=None, polished=False):
        data = self.data
        Ax = data.A @ x
        zc = np.clip(Ax, data.l, data.u)
        prim = float(np.abs(Ax - zc).max(initial=0.0))
        dual = float(np.abs(data.P @ x + data.q + data.A.T @ y).max(initial=0.0))
        obj = 0.5 * float(x @ (data.P @ x)) + float(data.q @ x) + data.const
        if status == PRIMAL_INFEASIBLE:
            obj = math.inf
        return QpResult(status, x, y, obj, it, prim, dual, cert, polished)

    def _polish(self, res: QpResult, l, u) -> Optional[QpResult]:
        """Solve the equality-constrained QP on the guessed active set."""
        data = self.data
        x, y = res.x, res.y
        Ax = data.A @ x
        tol = 1e-7
        low = (Ax - l < -y) | ((Ax - l) <= tol * (1 + np.abs(l))) & (y < 0)
        upp = (u - Ax < y) | ((u - Ax) <= tol * (1 + np.abs(u))) & (y > 0)
        low &= np.isfinite(l)
        upp &= np.isfinite(u)
        low &= ~upp
        act = np.flatnonzero(low | upp)
        b = np.where(low, l, u)[act]
        Aa = data.A[act, :]
        n, k = data.n, len(act)
        delta = 1e-9
        if k:
            K = sp.bmat([[data.P + delta * sp.identity(n), Aa.T], [Aa, -delta * sp.identity(k)]], format="csc")
            Kt = sp.bmat([[data.P, Aa.T], [Aa, sp.csc_matrix((k, k))]], format="csc")
        else:
            K = (data.P + delta * sp.identity(n)).tocsc()
            Kt = data.P.tocsc()
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return None
        rhs = np.concatenate([-data.q, b])
        sol = lu.solve(rhs)
        for _ in range(self.settings.polish_refine):
            sol = sol + lu.solve(rhs - Kt @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(data.m)
        yp[act] = sol[n:]
        # sign consistency of multipliers
        yp[np.flatnonzero(low)] = np.minimum(yp[np.flatnonzero(low)], 0.0)
        yp[np.flatnonzero(upp)] = np.maximum(yp[np.flatnonzero(upp)], 0.0)
        cand = self._result(OPTIMAL, xp, yp, res.iterations, None, True)
        scale_p = 1.0 + np.abs(data.A @ xp).max(initial=0.0)
        if cand.prim_res <= max(res.prim_res, 1e-9 * scale_p) and cand.dual_res <= max(res.dual_res, 1e-9):
            return cand
        return None


def solve_qp(program, warm_start=None, max_iter: int = 4000, tol=(1e-5, 1e-5), settings: QpSettings = None,
             warm_dual=None) -> QpResult:
    """Solve a convex program (``ConvexProgram``, linear ``MibpProgram`` or ``QpData``).

    For a ``ConvexProgram`` the returned point lives in the reduced space;
    use ``program.embed`` to lift it.
    """
    data = program if isinstance(program, QpData) else qp_data(program)
    st = settings or QpSettings()
    st = QpSettings(**{**st.__dict__, "max_iter": int(max_iter), "eps_abs": tol[0], "eps_rel": tol[1]})
    if data.n == 0:
        ok = np.all(data.l <= 1e-9) and np.all(data.u >= -1e-9)
        status = OPTIMAL if ok else PRIMAL_INFEASIBLE
        return QpResult(status, np.zeros(0), np.zeros(data.m), data.const if ok else math.inf, 0, 0.0, 0.0)
    ws = QpWorkspace(data, st)
    return ws.solve(warm_x=warm_start, warm_y=warm_dual)
