"""Mixed-integer bilinear program representation.

A program is ``min f(x, z)`` over continuous ``x`` and binary ``z`` subject
to linear and bilinear rows.  Rows may carry a *guard*: a conjunction of
binary literals under which the row is enforced, implemented with a big-M
relaxation computed from the variable box.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels

CONTINUOUS = "continuous"
BINARY = "binary"
LE = "<="
EQ = "=="


class ProgramError(ValueError):
    pass


class UnboundedBigM(ProgramError):
    pass


class ResidualNonconvexity(ProgramError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = CONTINUOUS
    lo: float = -math.inf
    hi: float = math.inf
    tag: str = ""

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, BINARY):
            raise ProgramError(f"unknown variable kind {self.kind!r}")
        if self.lo > self.hi:
            raise ProgramError(f"{self.name}: lo > hi")
        if self.kind == BINARY and (self.lo < 0 or self.hi > 1):
            raise ProgramError(f"{self.name}: binary bounds must lie in [0, 1]")


@dataclass(frozen=True)
class Constraint:
    """``sum a_k x_k + sum c x_i x_j  (<= | ==)  rhs``.

    ``guard`` holds ``(var, positive)`` literals; the row is enforced when
    every literal holds (``positive`` means the binary equals one).  With a
    guard, ``big_m = (M_up, M_down)`` relaxes the row by ``M * slack`` where
    slack counts the violated literals.
    """

    name: str
    linear: tuple = ()
    bilinear: tuple = ()
    sense: str = LE
    rhs: float = 0.0
    family: str = ""
    guard: tuple = ()
    big_m: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.sense not in (LE, EQ):
            raise ProgramError(f"bad sense {self.sense!r}")
        if self.guard and not all(math.isfinite(m) for m in self.big_m):
            raise UnboundedBigM(self.name)

    @property
    def kind(self) -> str:
        if not self.bilinear:
            return "linear"
        if self.sense == LE and all(i == j and c > 0 for i, j, c in self.bilinear):
            return "convex-quadratic"
        return "bilinear"

    def variables(self) -> set:
        out = {i for i, _ in self.linear}
        for i, j, _ in self.bilinear:
            out.update((i, j))
        out.update(v for v, _ in self.guard)
        return out

    def body(self, x) -> float:
        val = sum(c * x[i] for i, c in self.linear)
        val += sum(c * x[i] * x[j] for i, j, c in self.bilinear)
        return val

    def guard_slack(self, x) -> float:
        return sum(1.0 - (x[v] if pos else 1.0 - x[v]) for v, pos in self.guard)


@dataclass(frozen=True)
class Quadratic:
    """``sum c x_i x_j + sum q x_i + const`` (quadratic terms listed once)."""

    quad: tuple = ()
    linear: tuple = ()
    const: float = 0.0

    def value(self, x) -> float:
        val = self.const + sum(c * x[i] for i, c in self.linear)
        val += sum(c * x[i] * x[j] for i, j, c in self.quad)
        return float(val)

    def matrices(self, n: int):
        """Return ``(P, q, const)`` with ``f = 0.5 x'Px + q'x + const``."""
        rows, cols, vals = [], [], []
        for i, j, c in self.quad:
            if i == j:
                rows.append(i), cols.append(i), vals.append(2.0 * c)
            else:
                rows += [i, j]
                cols += [j, i]
                vals += [c, c]
        P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        P.sum_duplicates()
        q = np.zeros(n)
        for i, c in self.linear:
            q[i] += c
        return P, q, float(self.const)


@dataclass(frozen=True)
class MibpProgram:
    variables: tuple
    constraints: tuple
    objective: Quadratic = Quadratic()
    theta: tuple = ()
    meta: Mapping = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.variables)
        for con in self.constraints:
            for v in con.variables():
                if not 0 <= v < n:
                    raise ProgramError(f"{con.name}: undeclared variable {v}")

    @property
    def n(self) -> int:
        return len(self.variables)

    @cached_property
    def index(self) -> dict:
        return {v.name: k for k, v in enumerate(self.variables)}

    @cached_property
    def binaries(self) -> np.ndarray:
        return np.array([k for k, v in enumerate(self.variables) if v.kind == BINARY], dtype=int)

    @property
    def lo(self) -> np.ndarray:
        return np.array([v.lo for v in self.variables])

    @property
    def hi(self) -> np.ndarray:
        return np.array([v.hi for v in self.variables])

    def bilinear_constraints(self):
        return [c for c in self.constraints if c.kind == "bilinear"]

    def convex_constraints(self):
        return [c for c in self.constraints if c.kind != "bilinear"]

    def families(self) -> dict:
        out: dict = {}
        for c in self.constraints:
            out.setdefault(c.family, []).append(c)
        return out

    def with_changes(self, **kw) -> "MibpProgram":
        return replace(self, **kw)

    @cached_property
    def lowered(self) -> "Lowered":
        return lower(self)

    def to_json(self) -> str:
        return json.dumps(dump(self), indent=1)


# --- interval arithmetic / big-M -------------------------------------------

def _term_range(c, lo_i, hi_i, lo_j=None, hi_j=None):
    if lo_j is None:
        cands = (c * lo_i, c * hi_i)
    else:
        cands = [c * a * b for a in (lo_i, hi_i) for b in (lo_j, hi_j)]
        cands = [0.0 if math.isnan(v) else v for v in cands]
    return min(cands), max(cands)


def body_range(con: Constraint, lo: Sequence[float], hi: Sequence[float]):
    """Interval enclosure of the constraint body over the box."""
    low = high = 0.0
    for i, c in con.linear:
        a, b = _term_range(c, lo[i], hi[i])
        low += a
        high += b
    for i, j, c in con.bilinear:
        if i == j:
            sq = [lo[i] ** 2, hi[i] ** 2]
            top = max(sq)
            bottom = 0.0 if lo[i] <= 0 <= hi[i] else min(sq)
            a, b = sorted((c * bottom, c * top))
        else:
            a, b = _term_range(c, lo[i], hi[i], lo[j], hi[j])
        low += a
        high += b
    return low, high


def guard_bigM(con: Constraint, literals, lo, hi) -> Constraint:
    """Guard ``con`` by binary literals with interval-derived big-M.

    ``literals`` is a variable index (positive literal) or a sequence of
    ``(var, positive)`` pairs.  Returns a new constraint; existing guards are
    merged.
    """
    if isinstance(literals, (int, np.integer)):
        literals = ((int(literals), True),)
    literals = tuple((int(v), bool(p)) for v, p in literals)
    low, high = body_range(con, lo, hi)
    if not (math.isfinite(low) and math.isfinite(high)):
        raise UnboundedBigM(f"{con.name}: infinite bound in guarded constraint")
    m_up = max(0.0, high - con.rhs)
    m_down = max(0.0, con.rhs - low) if con.sense == EQ else 0.0
    if con.guard:
        m_up = max(m_up, con.big_m[0])
        m_down = max(m_down, con.big_m[1])
    return replace(con, guard=con.guard + literals, big_m=(m_up, m_down))


# --- evaluation --------------------------------------------------------------

def evaluate(program: MibpProgram, point) -> tuple:
    """Exact objective and per-constraint violation.

    Written directly against the constraint objects so it stays independent
    of the lowered (array) path used by the solvers.
    """
    x = [float(v) for v in point]
    if len(x) != program.n:
        raise ProgramError("point dimension mismatch")
    viol = np.zeros(len(program.constraints))
    for k, con in enumerate(program.constraints):
        g = con.body(x) - con.rhs
        slack = con.guard_slack(x) if con.guard else 0.0
        up = g - con.big_m[0] * slack
        if con.sense == LE:
            viol[k] = max(0.0, up)
        else:
            down = -g - con.big_m[1] * slack
            viol[k] = max(0.0, up, down)
    return program.objective.value(x), viol


# --- lowering to arrays ----------------------------------------------------

@dataclass
class Lowered:
    """Array form: rows ``r(x) <= 0`` or ``r(x) == 0`` with guards expanded."""

    rows: object  # kernels.PolyRows
    is_eq: np.ndarray
    owner: np.ndarray  # constraint index of each row
    P: sp.csr_matrix
    q: np.ndarray
    const: float
    lo: np.ndarray
    hi: np.ndarray

    @property
    def m(self) -> int:
        return len(self.is_eq)

    def values(self, x):
        return self.rows.values(x)

    def jac_t(self, x, w):
        return self.rows.jac_t(x, w)

    def jacobian(self, x) -> np.ndarray:
        """Dense Jacobian, for diagnostics and tests."""
        x = np.asarray(x, dtype=float)
        r = self.rows
        J = np.zeros((self.m, len(x)))
        for row in range(self.m):
            for k in range(r.indptr[row], r.indptr[row + 1]):
                J[row, r.idx[k]] += r.val[k]
        for row, i, j, c in zip(r.bil_row, r.bil_i, r.bil_j, r.bil_val):
            J[row, i] += c * x[j]
            J[row, j] += c * x[i]
        return J

    def objective(self, x) -> float:
        return 0.5 * float(x @ (self.P @ x)) + float(self.q @ x) + self.const

    def violation(self, x) -> np.ndarray:
        r = self.values(x)
        return np.where(self.is_eq, np.abs(r), np.maximum(r, 0.0))


def _expand(con: Constraint):
    """Yield ``(linear dict, bilinear list, rhs, is_eq)`` rows with guards folded in."""
    lin: dict = {}
    for i, c in con.linear:
        lin[i] = lin.get(i, 0.0) + c
    bil = list(con.bilinear)
    if not con.guard:
        yield lin, bil, con.rhs, con.sense == EQ
        return
    # slack = sum over literals of (1 - lit); lit = z or 1 - z
    def relaxed(sign, m):
        row = {i: sign * c for i, c in lin.items()}
        rhs = sign * con.rhs
        for v, pos in con.guard:
            if pos:  # + M (1 - z)
                row[v] = row.get(v, 0.0) + m
                rhs += m
            else:  # + M z
                row[v] = row.get(v, 0.0) - m
        return row, [(i, j, sign * c) for i, j, c in bil], rhs

    row, b, rhs = relaxed(1.0, con.big_m[0])
    yield row, b, rhs, False
    if con.sense == EQ:
        row, b, rhs = relaxed(-1.0, con.big_m[1])
        yield row, b, rhs, False


def lower(program: MibpProgram) -> Lowered:
    indptr, idx, val = [0], [], []
    brow, bi, bj, bval = [], [], [], []
    rhs, is_eq, owner = [], [], []
    for k, con in enumerate(program.constraints):
        for lin, bil, r, eq in _expand(con):
            row = len(rhs)
            for i in sorted(lin):
                if lin[i] != 0.0:
                    idx.append(i)
                    val.append(lin[i])
            indptr.append(len(idx))
            for i, j, c in bil:
                brow.append(row), bi.append(i), bj.append(j), bval.append(c)
            rhs.append(r)
            is_eq.append(eq)
            owner.append(k)
    n = program.n
    rows = kernels.PolyRows(
        np.array(indptr, dtype=np.int64), np.array(idx, dtype=np.int64), np.array(val, dtype=float),
        np.array(brow, dtype=np.int64), np.array(bi, dtype=np.int64), np.array(bj, dtype=np.int64),
        np.array(bval, dtype=float), np.array(rhs, dtype=float), n,
    )
    P, q, const = program.objective.matrices(n)
    return Lowered(rows, np.array(is_eq, dtype=bool), np.array(owner, dtype=int), P, q, const,
                   program.lo, program.hi)


# --- transformations -------------------------------------------------------

def to_mpcc(program: MibpProgram, eps: float = 1e-3) -> MibpProgram:
    """Replace each binary ``z`` by a continuous ``z`` in [0, 1] with ``|z - z^2| <= eps``."""
    variables = tuple(
        replace(v, kind=CONTINUOUS, lo=max(v.lo, 0.0), hi=min(v.hi, 1.0)) if v.kind == BINARY else v
        for v in program.variables
    )
    comps = []
    for k in program.binaries:
        name = program.variables[k].name
        if eps == 0.0:
            comps.append(Constraint(f"comp[{name}]", ((k, 1.0),), ((k, k, -1.0),), EQ, 0.0, "COMP"))
        else:
            comps.append(Constraint(f"comp+[{name}]", ((k, 1.0),), ((k, k, -1.0),), LE, eps, "COMP"))
            comps.append(Constraint(f"comp-[{name}]", ((k, -1.0),), ((k, k, 1.0),), LE, eps, "COMP"))
    meta = dict(program.meta)
    meta["mpcc_eps"] = eps
    meta["binaries"] = tuple(int(b) for b in program.binaries)
    return replace(program, variables=variables, constraints=program.constraints + tuple(comps), meta=meta)


@dataclass(frozen=True)
class ConvexProgram:
    """Continuous program left after fixing every binary."""

    program: MibpProgram
    free: np.ndarray  # indices in the parent program
    fixed_values: np.ndarray  # parent-length vector with fixed entries set

    def embed(self, x_free) -> np.ndarray:
        full = self.fixed_values.copy()
        full[self.free] = x_free
        return full

    def restrict(self, full) -> np.ndarray:
        return np.asarray(full, dtype=float)[self.free]


def fix_integers(program: MibpProgram, assignment) -> ConvexProgram:
    """Substitute binaries by constants and resolve guards.

    ``assignment`` maps binary index -> 0/1, or is a full-length vector whose
    binary entries are read.
    """
    bins = [int(b) for b in program.binaries]
    if isinstance(assignment, Mapping):
        values = {int(k): float(v) for k, v in assignment.items()}
    else:
        arr = np.asarray(assignment, dtype=float)
        if arr.shape == (program.n,):
            values = {b: float(arr[b]) for b in bins}
        elif arr.shape == (len(bins),):
            values = dict(zip(bins, map(float, arr)))
        else:
            raise ProgramError("assignment has wrong length")
    missing = [b for b in bins if b not in values]
    if missing:
        raise ProgramError(f"assignment misses binaries {missing[:5]}")
    values = {b: float(round(values[b])) for b in bins}

    free = np.array([k for k in range(program.n) if k not in values], dtype=int)
    new_index = {int(k): p for p, k in enumerate(free)}
    fixed_full = np.zeros(program.n)
    for b, v in values.items():
        fixed_full[b] = v

    cons = []
    for con in program.constraints:
        if con.guard:
            slack = con.guard_slack(fixed_full)
            if slack > 0.5:
                continue
        lin: dict = {}
        rhs = con.rhs
        for i, c in con.linear:
            if i in values:
                rhs -= c * values[i]
            else:
                lin[new_index[i]] = lin.get(new_index[i], 0.0) + c
        bil = []
        for i, j, c in con.bilinear:
            fi, fj = i in values, j in values
            if fi and fj:
                rhs -= c * values[i] * values[j]
            elif fi:
                lin[new_index[j]] = lin.get(new_index[j], 0.0) + c * values[i]
            elif fj:
                lin[new_index[i]] = lin.get(new_index[i], 0.0) + c * values[j]
            else:
                bil.append((new_index[i], new_index[j], c))
        out = Constraint(con.name, tuple(sorted(lin.items())), tuple(bil), con.sense, rhs, con.family)
        if out.kind == "bilinear":
            raise ResidualNonconvexity(f"{con.name} keeps a nonconvex product after fixing")
        if not out.linear and not out.bilinear:
            continue  # constant row; feasibility decided by the solver of record below
        cons.append(out)

    # constant rows that are violated make the program infeasible; keep them
    # visible as an impossible bound row on a dummy-free encoding
    for con in program.constraints:
        if con.guard and con.guard_slack(fixed_full) > 0.5:
            continue
        if all(i in values for i, _ in con.linear) and all(i in values and j in values for i, j, _ in con.bilinear):
            g = con.body(fixed_full) - con.rhs
            bad = g > 1e-9 if con.sense == LE else abs(g) > 1e-9
            if bad:
                cons.append(Constraint(f"infeasible[{con.name}]", (), (), LE, -1.0, "INFEASIBLE"))

    obj_lin: dict = {}
    const = program.objective.const
    quad = []
    for i, c in program.objective.linear:
        if i in values:
            const += c * values[i]
        else:
            obj_lin[new_index[i]] = obj_lin.get(new_index[i], 0.0) + c
    for i, j, c in program.objective.quad:
        fi, fj = i in values, j in values
        if fi and fj:
            const += c * values[i] * values[j]
        elif fi:
            obj_lin[new_index[j]] = obj_lin.get(new_index[j], 0.0) + c * values[i]
        elif fj:
            obj_lin[new_index[i]] = obj_lin.get(new_index[i], 0.0) + c * values[j]
        else:
            quad.append((new_index[i], new_index[j], c))
    variables = tuple(program.variables[k] for k in free)
    sub = MibpProgram(variables, tuple(cons), Quadratic(tuple(quad), tuple(sorted(obj_lin.items())), const),
                      program.theta, dict(program.meta))
    return ConvexProgram(sub, free, fixed_full)


# --- JSON dump --------------------------------------------------------------

def dump(program: MibpProgram) -> dict:
    def num(v):
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")

    return {
        "variables": [
            {"name": v.name, "kind": v.kind, "lo": num(v.lo), "hi": num(v.hi), "tag": v.tag}
            for v in program.variables
        ],
        "constraints": [
            {
                "name": c.name, "family": c.family, "kind": c.kind, "sense": c.sense, "rhs": c.rhs,
                "linear": [[i, a] for i, a in c.linear],
                "bilinear": [[i, j, a] for i, j, a in c.bilinear],
                "guard": [[v, p] for v, p in c.guard],
                "big_m": list(c.big_m),
            }
            for c in program.constraints
        ],
        "objective": {
            "quad": [[i, j, c] for i, j, c in program.objective.quad],
            "linear": [[i, c] for i, c in program.objective.linear],
            "const": program.objective.const,
        },
        "theta": list(program.theta),
    }


def load(data: Mapping) -> MibpProgram:
    num = float  # float("inf") / float("-inf") parse the dumped markers

    variables = tuple(Variable(v["name"], v["kind"], num(v["lo"]), num(v["hi"]), v.get("tag", ""))
                      for v in data["variables"])
    cons = tuple(
        Constraint(c["name"], tuple((int(i), float(a)) for i, a in c["linear"]),
                   tuple((int(i), int(j), float(a)) for i, j, a in c["bilinear"]),
                   c["sense"], float(c["rhs"]), c.get("family", ""),
                   tuple((int(v), bool(p)) for v, p in c.get("guard", [])),
                   tuple(float(m) for m in c.get("big_m", (0.0, 0.0))))
        for c in data["constraints"]
    )
    o = data.get("objective", {})
    obj = Quadratic(tuple((int(i), int(j), float(c)) for i, j, c in o.get("quad", [])),
                    tuple((int(i), float(c)) for i, c in o.get("linear", [])), float(o.get("const", 0.0)))
    return MibpProgram(variables, cons, obj, tuple(data.get("theta", ())))


class Builder:
    """Incremental program construction used by the model and the compilers."""

    def __init__(self):
        self.variables: list = []
        self.constraints: list = []
        self._index: dict = {}
        self._bounds = None

    def var(self, name, kind=CONTINUOUS, lo=-math.inf, hi=math.inf, tag="") -> int:
        if name in self._index:
            raise ProgramError(f"duplicate variable {name}")
        self._index[name] = len(self.variables)
        self._bounds = None
        self.variables.append(Variable(name, kind, float(lo), float(hi), tag))
        return self._index[name]

    def __getitem__(self, name) -> int:
        return self._index[name]

    def add(self, name, linear=(), bilinear=(), sense=LE, rhs=0.0, family="", guard=()) -> Constraint:
        lin: dict = {}
        for i, c in linear:
            lin[i] = lin.get(i, 0.0) + float(c)
        con = Constraint(name, tuple((i, c) for i, c in lin.items() if c != 0.0),
                         tuple((int(i), int(j), float(c)) for i, j, c in bilinear),
                         sense, float(rhs), family)
        if guard:
            if self._bounds is None:
                self._bounds = ([v.lo for v in self.variables], [v.hi for v in self.variables])
            con = guard_bigM(con, guard, *self._bounds)
        self.constraints.append(con)
        return con

    def build(self, objective=Quadratic(), theta=(), meta=None) -> MibpProgram:
        return MibpProgram(tuple(self.variables), tuple(self.constraints), objective, tuple(theta), meta or {})


def iter_literals(literals: Iterable) -> tuple:
    return tuple((int(v), bool(p)) for v, p in literals)
