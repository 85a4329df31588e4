"""Augmented Lagrangian NLP solver and MPCC helpers.

The inner problem ``min_x L_rho(x, lam)`` over the variable box is solved by
scipy's L-BFGS-B; the outer loop updates multipliers and the penalty.
Binaries are treated as continuous variables in their bounds, so an MPCC
(``program.to_mpcc``) or a relaxed program can be passed directly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import model as _model
from .program import MibpProgram, to_mpcc

log = logging.getLogger(__name__)

FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
MAX_ITERATIONS = "MaxIterations"


class NonSmoothInput(ValueError):
    pass


@dataclass
class NlpOptions:
    feas_tol: float = 1e-6
    stat_tol: float = 1e-4
    max_outer: int = 40
    max_inner: int = 400
    penalty0: float = 10.0
    penalty_factor: float = 10.0
    penalty_cap: float = 1e8
    decrease: float = 0.25


@dataclass
class NlpResult:
    status: str
    x: np.ndarray
    violation: float
    objective: float
    outer_iterations: int
    inner_iterations: int
    stationarity: float = math.inf
    multipliers: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def _csr_parts(P):
    P = P.tocsr()
    return (np.ascontiguousarray(P.indptr, dtype=np.int64), np.ascontiguousarray(P.indices, dtype=np.int64),
            np.ascontiguousarray(P.data, dtype=np.float64))


def _violation(r, is_eq):
    if r.size == 0:
        return 0.0
    return float(np.max(np.where(is_eq, np.abs(r), np.maximum(r, 0.0))))


def solve_nlp(program: MibpProgram, initial=None, options: NlpOptions = None, lo=None, hi=None,
              multipliers=None) -> NlpResult:
    """Find a stationary point of ``program`` near ``initial``.

    ``lo``/``hi`` override the variable box (used to fix binaries).
    """
    opts = options or NlpOptions()
    low = program.lowered
    rows = low.rows
    n = program.n
    lo = low.lo if lo is None else np.asarray(lo, dtype=float)
    hi = low.hi if hi is None else np.asarray(hi, dtype=float)
    x = np.zeros(n) if initial is None else np.asarray(initial, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError("initial point has the wrong dimension")
    # polynomial rows always have gradients; NaN/inf data is the one way to lose them
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(rows.val)) and np.all(np.isfinite(rows.bil_val))
            and np.all(np.isfinite(rows.rhs)) and np.all(np.isfinite(low.q)) and np.all(np.isfinite(low.P.data))):
        raise NonSmoothInput("non-finite coefficients or start point")
    x = np.clip(x, lo, hi)
    is_eq = low.is_eq.astype(np.uint8)
    eqb = low.is_eq
    p_indptr, p_idx, p_val = _csr_parts(low.P)
    q = np.ascontiguousarray(low.q, dtype=np.float64)
    const = float(low.const)
    m = low.m
    lam = np.zeros(m) if multipliers is None else np.asarray(multipliers, dtype=float).copy()
    rho = opts.penalty0
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))

    inner_total = 0
    hist = []
    r = rows.values(x)
    viol = _violation(r, eqb)
    best_viol = viol
    status = MAX_ITERATIONS
    stat = math.inf
    accepted = math.inf  # violation at the last accepted outer iterate
    k = 0

    def fun(xv):
        val, grad, _ = rows.al_value_grad(xv, lam, rho, is_eq, p_indptr, p_idx, p_val, q, const)
        return val, grad

    for k in range(1, opts.max_outer + 1):
        res = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": opts.max_inner, "maxcor": 20, "ftol": 1e-15, "gtol": 1e-10})
        inner_total += int(res.get("nit", 0))
        x_try = np.clip(res.x, lo, hi)
        r = rows.values(x_try)
        new_viol = _violation(r, eqb)
        if new_viol > accepted and accepted > opts.feas_tol:
            # reject: keep the previous iterate and multipliers, penalize harder
            hist.append((k, new_viol, stat, rho, False))
            if rho >= opts.penalty_cap:
                status = INFEASIBLE
                break
            rho = min(rho * opts.penalty_factor, opts.penalty_cap)
            continue
        x = x_try
        accepted = new_viol
        lam = np.where(eqb, lam + rho * r, np.maximum(0.0, lam + rho * r))
        # stationarity of the Lagrangian, projected on the box
        g = low.P @ x + q + rows.jac_t(x, lam)
        stat = float(np.max(np.abs(x - np.clip(x - g, lo, hi)), initial=0.0))
        hist.append((k, new_viol, stat, rho, True))
        if new_viol <= opts.feas_tol and stat <= opts.stat_tol:
            viol = new_viol
            status = FEASIBLE
            break
        if new_viol > opts.decrease * viol and new_viol > opts.feas_tol:
            if rho >= opts.penalty_cap:
                if new_viol >= 0.99 * best_viol:
                    viol = new_viol
                    status = INFEASIBLE
                    break
            rho = min(rho * opts.penalty_factor, opts.penalty_cap)
        viol = new_viol
        best_viol = min(best_viol, viol)
    obj = low.objective(x)
    if status == MAX_ITERATIONS and viol <= opts.feas_tol and stat <= 10 * opts.stat_tol:
        status = FEASIBLE
    return NlpResult(status, x, viol, obj, k, inner_total, stat, lam, hist)


# --- MPCC -----------------------------------------------------------------------

@dataclass
class MpccResult:
    status: str
    x: np.ndarray
    violation: float
    objective: float
    nlp: NlpResult
    polish: Optional[NlpResult] = None


def solve_mpcc(program: MibpProgram, initial=None, eps: float = 1e-3, options: NlpOptions = None,
               polish: bool = True, mpcc: Optional[MibpProgram] = None) -> MpccResult:
    """Solve the complementarity reformulation, then re-solve with rounded binaries.

    The second solve fixes every binary to its rounded value through the
    bounds, so the returned point satisfies integrality exactly.
    """
    mp = mpcc if mpcc is not None else to_mpcc(program, eps)
    first = solve_nlp(mp, initial, options)
    if not first.feasible or not polish:
        return MpccResult(first.status, first.x, first.violation, first.objective, first)
    bins = program.binaries
    x0 = first.x.copy()
    x0[bins] = np.round(x0[bins])
    lo, hi = program.lo.copy(), program.hi.copy()
    lo[bins] = hi[bins] = x0[bins]
    second = solve_nlp(program, x0, options, lo=lo, hi=hi)
    return MpccResult(second.status, second.x, second.violation, second.objective, first, second)


def solve_multistart(program: MibpProgram, candidates: Sequence, eps: float = 1e-3, options: NlpOptions = None,
                     accept=None):
    """Try warm starts in order until one is accepted.

    ``accept(result)`` defaults to ``result.status == Feasible``.  Returns
    ``(result or None, candidates consumed)``.
    """
    mp = to_mpcc(program, eps)
    accept = accept or (lambda r: r.status == FEASIBLE)
    used = 0
    last = None
    for cand in candidates:
        used += 1
        res = solve_mpcc(program, cand, eps, options, mpcc=mp)
        last = res
        if accept(res):
            return res, used
    return (None if last is None else last), used


# --- warm starts -------------------------------------------------------------------

def _widest_gap(instance):
    W = instance.shelf.W
    spans = []
    for s in instance.stored:
        v = _model.vertices(s.book, s.pose)
        spans.append((float(v[:, 0].min()), float(v[:, 0].max())))
    spans.sort()
    left = -0.5 * W
    best = (-1.0, 0.0)
    for lo_x, hi_x in spans + [(0.5 * W, 0.5 * W)]:
        if lo_x - left > best[0]:
            best = (lo_x - left, 0.5 * (lo_x + left))
        left = max(left, hi_x)
    return best


def manual_solution(instance):
    """Stored books unmoved and the insert upright in the widest gap.

    When no gap fits the insert it goes to the shelf centre, which is
    infeasible but still a reasonable starting point.
    """
    width, centre = _widest_gap(instance)
    book = instance.insert
    x = centre if width >= book.w else 0.0
    slot = sum(1 for s in instance.stored if s.pose.x < x)
    pose = _model.Pose(x, 0.5 * book.h, 0.0)
    return _model.reference_solution(instance, pose, _model.Mode.UPRIGHT, None, slot)


def warm_start_manual(program: MibpProgram, instance=None) -> np.ndarray:
    instance = instance or program.meta["instance"]
    return _model.point_from_solution(program, manual_solution(instance), instance)
