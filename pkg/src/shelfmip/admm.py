"""Consensus ADMM between a mode-only MIP and a bilinear NLP.

Both copies live on the variable vector of :func:`model.build_minlp`.  The
MIP copy keeps the linear families and integrality, the NLP copy keeps
everything except the one-hot mode rows (modes become continuous in [0, 1]).
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as _model
from .bnb import solve_bnb
from .nlp import NlpOptions, solve_nlp, warm_start_manual
from .program import MibpProgram, Quadratic

log = logging.getLogger(__name__)

MIP_FAMILIES = frozenset({"A", "B", "D", "G", "H1", "I1", "J1", "K2", "K3", "L2", "L3", "K0", "L0", "O"})
NLP_EXCLUDED = frozenset({"G"})

CONSENSUS = "Consensus"
NO_CONSENSUS = "NoConsensus"


@dataclass
class AdmmOptions:
    gamma: float = 1.5
    G0: Optional[np.ndarray] = None  # diagonal; default from length_scale
    length_scale: float = 0.1  # cm -> dm
    max_outer: int = 20
    consensus_tol: float = 1e-3
    mip_node_limit: int = 200
    mip_time_limit: Optional[float] = 30.0
    nlp: NlpOptions = field(default_factory=lambda: NlpOptions(max_outer=25))
    trace: bool = False


@dataclass
class AdmmState:
    var1: np.ndarray
    var2: np.ndarray
    w: np.ndarray
    G: np.ndarray
    gamma: float
    k: int = 0

    def __post_init__(self):
        if self.var1.shape != self.var2.shape or self.w.shape != self.var1.shape:
            raise ValueError("copies and duals must share one shape")
        if np.any(self.G <= 0):
            raise ValueError("weights must be positive")

    def update(self):
        """Dual and weight update, applied in the order the equations list them."""
        self.w = self.w + self.var1 - self.var2
        self.G = self.gamma * self.G
        self.w = self.w / self.gamma
        self.k += 1


@dataclass
class AdmmResult:
    status: str
    solution: _model.BookshelfSolution
    x: np.ndarray
    iterations: int
    residual: float
    history: list
    state: AdmmState

    def trace_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["k", "residual", "mip_objective", "nlp_status"])
        for row in self.history:
            wr.writerow([row[0], f"{row[1]:.6e}", f"{row[2]:.6e}", row[3]])
        return buf.getvalue()


def variable_scale(program: MibpProgram, length_scale: float = 0.1) -> np.ndarray:
    """Per-variable scale: lengths (positions, vertices, plane offsets) get
    ``length_scale``, unitless variables 1."""
    L = _model.layout_of(program)
    d = np.ones(program.n)
    idx = list(L.px) + list(L.py) + [v for row in L.vx for v in row] + [v for row in L.vy for v in row]
    idx += list(L.b.values())
    d[idx] = length_scale
    return d


def _norm_objective(G, target, base: Optional[Quadratic] = None) -> Quadratic:
    """``sum G_i (x_i - t_i)^2`` plus an optional base objective."""
    quad = [(i, i, float(g)) for i, g in enumerate(G)]
    lin = [(i, float(-2.0 * g * t)) for i, (g, t) in enumerate(zip(G, target))]
    const = float(np.sum(G * target * target))
    if base is not None:
        quad += list(base.quad)
        lin += list(base.linear)
        const += float(base.const)
    return Quadratic(tuple(quad), tuple(lin), const)


def split_program(program: MibpProgram):
    """Return ``(mip, nlp)`` constraint subsets over the full variable vector."""
    mip = tuple(c for c in program.constraints if c.family in MIP_FAMILIES and c.kind == "linear"
                and c.family not in ("K1", "L1"))
    nlp = tuple(c for c in program.constraints if c.family not in NLP_EXCLUDED)
    return mip, nlp


def solve_admm(instance: _model.ProblemInstance, options: AdmmOptions = None, program: MibpProgram = None,
               initial=None) -> AdmmResult:
    opts = options or AdmmOptions()
    prog = program or _model.build_minlp(instance)
    mip_cons, nlp_cons = split_program(prog)
    scale = variable_scale(prog, opts.length_scale)
    G = (scale ** 2).copy() if opts.G0 is None else np.asarray(opts.G0, dtype=float).copy()
    x0 = warm_start_manual(prog, instance) if initial is None else np.asarray(initial, dtype=float)
    state = AdmmState(x0.copy(), x0.copy(), np.zeros(prog.n), G, opts.gamma)
    bins = prog.binaries
    history = []
    status = NO_CONSENSUS
    residual = float("inf")
    for k in range(1, opts.max_outer + 1):
        # (i) MIP step
        mip = MibpProgram(prog.variables, mip_cons, _norm_objective(state.G, state.var2 - state.w), prog.theta,
                          prog.meta)
        hint = np.clip(state.var1, prog.lo, prog.hi)
        hint[bins] = np.round(hint[bins])
        res = solve_bnb(mip, incumbent_hint=hint, node_limit=opts.mip_node_limit, time_limit=opts.mip_time_limit)
        mip_obj = res.objective
        if res.x is not None:
            state.var1 = res.x.copy()
            state.var1[bins] = np.round(state.var1[bins])
        # (ii) NLP step, warm-started at the previous NLP copy
        nlp_prog = MibpProgram(prog.variables, nlp_cons,
                               _norm_objective(state.G, state.var1 + state.w, prog.objective), prog.theta, prog.meta)
        nres = solve_nlp(nlp_prog, state.var2, opts.nlp)
        state.var2 = nres.x.copy()
        residual = float(np.max(np.abs(scale * (state.var1 - state.var2))))
        history.append((k, residual, float(mip_obj), nres.status))
        log.debug("admm k=%d residual=%.3e mip=%s nlp=%s", k, residual, res.status, nres.status)
        # (iii) dual and weight update
        state.update()
        if residual <= opts.consensus_tol:
            status = CONSENSUS
            break
    x = state.var2.copy()
    x[bins] = state.var1[bins]
    sol = _model.solution_from_point(instance, prog, x)
    return AdmmResult(status, sol, x, len(history), residual, history, state)
