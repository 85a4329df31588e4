"""Branch and bound over QP relaxations for mixed-integer convex programs."""
from __future__ import annotations

import csv
import heapq
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .envelope import MicpProgram
from .program import MibpProgram, evaluate, fix_integers
from .qp import PRIMAL_INFEASIBLE, QpSettings, QpWorkspace, qp_data, solve_qp

log = logging.getLogger(__name__)

OPTIMAL = "Optimal"
FEASIBLE = "Feasible"
INFEASIBLE = "Infeasible"
TIME_LIMIT = "TimeLimit"

INT_TOL = 1e-6
FEAS_TOL = 1e-6


class InvalidHint(ValueError):
    pass


@dataclass
class MipResult:
    status: str
    x: Optional[np.ndarray]
    objective: float
    bound: float
    nodes: int
    gap: float
    warnings: list = field(default_factory=list)
    gap_history: list = field(default_factory=list)
    hint_used: bool = False

    @property
    def success(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE) and self.x is not None


@dataclass(order=True)
class _Node:
    bound: float
    order: int
    depth: int = field(compare=False)
    lo: np.ndarray = field(compare=False, repr=False)
    hi: np.ndarray = field(compare=False, repr=False)
    warm_x: Optional[np.ndarray] = field(compare=False, default=None, repr=False)
    warm_y: Optional[np.ndarray] = field(compare=False, default=None, repr=False)


def _as_assignment(program: MibpProgram, values) -> dict:
    bins = [int(b) for b in program.binaries]
    if isinstance(values, Mapping):
        return {int(k): float(v) for k, v in values.items()}
    arr = np.asarray(values, dtype=float)
    if arr.shape == (program.n,):
        return {b: float(arr[b]) for b in bins}
    if arr.shape == (len(bins),):
        return dict(zip(bins, map(float, arr)))
    raise InvalidHint("assignment has the wrong length")


def _rel_gap(inc: float, bound: float) -> float:
    if not math.isfinite(inc):
        return math.inf
    if bound == -math.inf:
        return math.inf
    return max(0.0, (inc - bound) / max(1.0, abs(inc)))


class _Bounder:
    """Certified Lagrangian lower bound for diagonal objectives over a box."""

    def __init__(self, data, m_general: int):
        self.data = data
        self.mg = m_general
        P = data.P
        d = P.diagonal()
        self.diag = d
        coo = P.tocoo()
        self.ok = bool(np.all((coo.row == coo.col) | (coo.data == 0.0))) and bool(np.all(d >= 0.0))
        Ag = data.A[:m_general, :]
        self.AgT = Ag.T.tocsr()

    def __call__(self, y, l, u, lo, hi) -> float:
        if not self.ok:
            return -math.inf
        if y is None:
            y = np.zeros(self.mg)
        mg = self.mg
        yg = np.asarray(y[:mg], dtype=float)
        lg, ug = l[:mg], u[:mg]
        ypos = np.where(np.isfinite(ug), np.maximum(yg, 0.0), 0.0)
        yneg = np.where(np.isfinite(lg), np.minimum(yg, 0.0), 0.0)
        yv = ypos + yneg
        c = self.data.q + self.AgT @ yv
        p = self.diag
        with np.errstate(invalid="ignore", divide="ignore"):
            xstar = np.where(p > 0, np.clip(-c / np.where(p > 0, p, 1.0), lo, hi), np.where(c > 0, lo, hi))
        xstar = np.where((p <= 0) & (c == 0), np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0)), xstar)
        if not np.all(np.isfinite(xstar)):
            return -math.inf
        val = float(np.sum(0.5 * p * xstar * xstar + c * xstar)) + self.data.const
        val -= float(np.sum(np.where(ypos > 0, ug, 0.0) * ypos) + np.sum(np.where(yneg < 0, lg, 0.0) * yneg))
        return val


def solve_bnb(program, fixed: Optional[Mapping] = None, time_limit: Optional[float] = None,
              node_limit: Optional[int] = None, gap_tol: float = 1e-6, incumbent_hint=None,
              max_iter: int = 4000, node_log=None, settings: QpSettings = None) -> MipResult:
    """Minimize a mixed-integer convex program.

    ``fixed`` maps binary indices to 0/1 and is never branched on.
    ``incumbent_hint`` is a binary assignment evaluated up front.  ``node_log``
    (path or text stream) receives one CSV row per node.
    """
    prog = program.program if isinstance(program, MicpProgram) else program
    if prog.bilinear_constraints():
        raise ValueError("branch and bound needs a program without bilinear rows")
    t0 = time.perf_counter()
    warnings: list = []
    bins = np.array([int(b) for b in prog.binaries], dtype=int)
    data = qp_data(prog)
    mg = data.m - prog.n  # general rows precede one bound row per variable
    settings = settings or QpSettings(rho=0.1)
    exact = QpSettings(**{**settings.__dict__, "eps_abs": 1e-8, "eps_rel": 1e-8})
    ws = QpWorkspace(data, settings)
    bounder = _Bounder(data, mg)

    lo0 = data.l[mg:].copy()
    hi0 = data.u[mg:].copy()
    fixed = {int(k): float(round(v)) for k, v in (fixed or {}).items()}
    for k, v in fixed.items():
        lo0[k] = hi0[k] = v

    log_rows = []
    incumbent, inc_x = math.inf, None
    hint_used = False

    def try_assignment(assign: dict, warm=None):
        """Tight solve with every binary fixed; returns (objective, full x) or None."""
        cp = fix_integers(prog, assign)
        res = solve_qp(cp, None if warm is None else cp.restrict(warm), max_iter=max(max_iter, 30000),
                       tol=(exact.eps_abs, exact.eps_rel), settings=exact)
        if not res.optimal:
            return None
        full = cp.embed(res.x)
        _, viol = evaluate(prog, full)
        if viol.size and viol.max() > FEAS_TOL:
            return None
        return res.objective, full

    if incumbent_hint is not None:
        try:
            hint = _as_assignment(prog, incumbent_hint)
            clash = [k for k, v in fixed.items() if k in hint and round(hint[k]) != v]
            if clash:
                raise InvalidHint(f"hint contradicts fixed binaries {clash[:5]}")
            hint.update(fixed)
            missing = [b for b in bins if int(b) not in hint]
            if missing:
                raise InvalidHint(f"hint misses binaries {missing[:5]}")
            warm = None
            if not isinstance(incumbent_hint, Mapping) and np.shape(incumbent_hint) == (prog.n,):
                warm = np.asarray(incumbent_hint, dtype=float)
            got = try_assignment(hint, warm)
            if got is not None:
                incumbent, inc_x = got
                hint_used = True
            else:
                warnings.append("incumbent hint infeasible")
        except InvalidHint as exc:
            warnings.append(f"InvalidHint: {exc}")
            log.warning("ignoring hint: %s", exc)

    def node_bounds(node):
        l = data.l.copy()
        u = data.u.copy()
        l[mg:] = node.lo
        u[mg:] = node.hi
        return l, u

    counter = 0
    heap: list = []
    root = _Node(-math.inf, counter, 0, lo0, hi0)
    dive: Optional[_Node] = root
    plunging = not math.isfinite(incumbent)
    nodes = 0
    gap_hist = []
    last_gap = math.inf
    status = None

    def improvable(b):
        if not math.isfinite(incumbent):
            return b < math.inf
        return b < incumbent - gap_tol * max(1.0, abs(incumbent))

    def global_bound(extra=None):
        cands = [n.bound for n in heap]
        if extra is not None:
            cands.append(extra)
        return min(cands) if cands else incumbent

    while dive is not None or heap:
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            status = "limit"
            break
        if node_limit is not None and nodes >= node_limit:
            status = "limit"
            break
        if dive is not None:
            node, dive = dive, None
        else:
            node = heapq.heappop(heap)
        if not improvable(node.bound):
            continue
        l, u = node_bounds(node)
        if math.isfinite(incumbent):
            cheap = bounder(None, l, u, node.lo, node.hi)  # box bound, no solve needed
            if not improvable(cheap):
                node.bound = max(node.bound, cheap)
                if dive is None and plunging and heap:
                    dive = heapq.heappop(heap)
                continue
        nodes += 1
        res = ws.solve(l, u, warm_x=node.warm_x, warm_y=node.warm_y, max_iter=max_iter)
        if res.status == PRIMAL_INFEASIBLE:
            nb = math.inf
        elif res.optimal:
            nb = max(node.bound, res.objective)
        else:
            nb = max(node.bound, bounder(res.y, l, u, node.lo, node.hi), bounder(None, l, u, node.lo, node.hi))
        inc_before = incumbent
        branch_var = None
        if math.isfinite(nb) and improvable(nb):
            xb = res.x[bins] if len(bins) else np.zeros(0)
            free = node.lo[bins] < node.hi[bins]
            frac = np.abs(xb - np.round(xb))
            integral = np.all(frac[free] <= INT_TOL) if free.any() else True
            if integral:
                got = try_assignment({int(b): float(round(v)) for b, v in zip(bins, xb)}, res.x)
                if got is not None and got[0] < incumbent:
                    incumbent, inc_x = got
                if res.optimal or not free.any():
                    pass  # relaxation optimum is integral: subtree solved
                else:
                    branch_var = int(bins[np.flatnonzero(free)[0]])
            else:
                score = np.where(free, frac, -1.0)
                best = score.max()
                k = int(np.flatnonzero(score >= best - 1e-12)[0])  # lowest id among ties
                branch_var = int(bins[k])

        if branch_var is not None:
            children = []
            for val in (0.0, 1.0):
                lo, hi = node.lo.copy(), node.hi.copy()
                lo[branch_var] = hi[branch_var] = val
                counter += 1
                children.append(_Node(nb, counter, node.depth + 1, lo, hi, res.x, res.y))
            if plunging:
                # follow the rounding direction, keep the sibling for later
                pick = 1 if res.x[branch_var] >= 0.5 else 0
                dive = children[pick]
                heapq.heappush(heap, children[1 - pick])
            else:
                for ch in children:
                    heapq.heappush(heap, ch)
        elif plunging:
            plunging = not math.isfinite(incumbent)
            if plunging and heap:
                dive = heapq.heappop(heap)

        if incumbent < inc_before and heap:
            # new incumbent: plunge from the best open node
            plunging = True
            dive = heapq.heappop(heap) if dive is None else dive
        elif incumbent < inc_before:
            plunging = False

        gb = global_bound(dive.bound if dive is not None else None)
        gap = min(last_gap, _rel_gap(incumbent, gb))
        last_gap = gap
        gap_hist.append(gap)
        log_rows.append((nodes, node.depth, nb, incumbent))
        if math.isfinite(incumbent) and gap <= gap_tol:
            heap.clear()
            dive = None
            break
        if plunging and dive is None and heap and not math.isfinite(incumbent):
            dive = heapq.heappop(heap)

    if node_log is not None:
        _write_log(node_log, log_rows)

    remaining = [n.bound for n in heap] + ([dive.bound] if dive is not None else [])
    if status == "limit":
        bound = min(remaining + [incumbent]) if remaining else incumbent
        gap = min(last_gap, _rel_gap(incumbent, bound))
        st = FEASIBLE if inc_x is not None else TIME_LIMIT
        return MipResult(st, inc_x, incumbent, bound, nodes, gap, warnings, gap_hist, hint_used)
    if inc_x is None:
        return MipResult(INFEASIBLE, None, math.inf, math.inf, nodes, math.inf, warnings, gap_hist, hint_used)
    bound = min(remaining + [incumbent]) if remaining else incumbent
    if nodes == 0:
        bound = incumbent
    gap = min(last_gap, _rel_gap(incumbent, bound))
    return MipResult(OPTIMAL, inc_x, incumbent, bound, nodes, gap, warnings, gap_hist, hint_used)


def _write_log(target, rows):
    own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
    fh = open(target, "w", newline="") if own else target
    try:
        w = csv.writer(fh)
        w.writerow(["node", "depth", "bound", "incumbent"])
        for r in rows:
            w.writerow(r)
    finally:
        if own:
            fh.close()
