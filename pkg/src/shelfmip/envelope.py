"""Mixed-integer convex envelopes of bilinear programs.

Each gridded scalar (or angle, gridded on ``theta`` and represented by its
``(cos, sin)`` box) picks one cell through a logarithmic vertex-weight
disjunction.  Every distinct product ``x*y`` gets a variable ``w`` bounded by
McCormick inequalities of the chosen cell pair.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import product as cartesian
from typing import Mapping, Optional, Sequence

import numpy as np

from .program import BINARY, CONTINUOUS, EQ, LE, Builder, Constraint, MibpProgram


class EnvelopeError(ValueError):
    pass


class DegenerateBounds(EnvelopeError):
    pass


class CodeCollision(EnvelopeError):
    pass


class UncoveredVariable(EnvelopeError):
    pass


class EmptyRestriction(EnvelopeError):
    pass


# --- McCormick ---------------------------------------------------------------

def mccormick(w, x, y, xbounds, ybounds) -> list:
    """The four McCormick rows for ``w = x*y`` as ``(terms, rhs)`` meaning ``sum c*v <= rhs``.

    ``x`` and ``y`` may be the same variable (a square); coefficients are
    merged and the duplicate upper row dropped.
    """
    xl, xu = map(float, xbounds)
    yl, yu = map(float, ybounds)
    if xl > xu or yl > yu:
        raise DegenerateBounds(f"bounds {xbounds} x {ybounds}")
    raw = [
        ([(w, -1.0), (x, yl), (y, xl)], xl * yl),  # w >= xl*y + x*yl - xl*yl
        ([(w, -1.0), (x, yu), (y, xu)], xu * yu),  # w >= xu*y + x*yu - xu*yu
        ([(w, 1.0), (x, -yl), (y, -xu)], -xu * yl),  # w <= xu*y + x*yl - xu*yl
        ([(w, 1.0), (x, -yu), (y, -xl)], -xl * yu),  # w <= xl*y + x*yu - xl*yu
    ]
    rows, seen = [], set()
    for terms, rhs in raw:
        merged: dict = {}
        for v, c in terms:
            merged[v] = merged.get(v, 0.0) + c
        key = (tuple(sorted(merged.items())), rhs)
        if key in seen:
            continue
        seen.add(key)
        rows.append((tuple(merged.items()), rhs))
    return rows


def mccormick_interval(x, y, xbounds, ybounds):
    """Range of ``w`` the envelope allows at the point ``(x, y)``."""
    xl, xu = xbounds
    yl, yu = ybounds
    lower = max(xl * y + x * yl - xl * yl, xu * y + x * yu - xu * yu)
    upper = min(xu * y + x * yl - xu * yl, xl * y + x * yu - xl * yu)
    return lower, upper


# --- codes -----------------------------------------------------------------------

def n_bits(n: int) -> int:
    if n < 1:
        raise EmptyRestriction("need at least one region")
    return int(math.ceil(math.log2(n))) if n > 1 else 0


def gray_code(p: int, m: int) -> tuple:
    g = p ^ (p >> 1)
    return tuple((g >> (m - 1 - b)) & 1 for b in range(m))


def gray_decode(bits: Sequence[int]) -> int:
    g = 0
    for b in bits:
        g = (g << 1) | int(b)
    p = 0
    while g:
        p ^= g
        g >>= 1
    return p


def gray_codes(n: int) -> list:
    m = n_bits(n)
    return [gray_code(p, m) for p in range(n)]


# --- disjunctions ------------------------------------------------------------------

@dataclass
class Disjunction:
    """Variables and rows of one log-encoded disjunction."""

    x: tuple  # the represented coordinates
    polytopes: list  # vertex arrays, shape (n_vertices, dim)
    codes: list
    bits: list  # binary variable indices
    lam: list  # per polytope, list of lambda indices
    constraints: list = field(default_factory=list)
    program: Optional[MibpProgram] = None

    def deviation_terms(self, code):
        """Linear form of ``sum_l |z_l - code_l|`` as ``(terms, const)``."""
        terms, const = [], 0.0
        for z, c in zip(self.bits, code):
            if c:
                terms.append((z, -1.0))
                const += 1.0
            else:
                terms.append((z, 1.0))
        return terms, const

    def literals(self, k: int) -> tuple:
        """Guard literals that hold exactly when polytope ``k`` is selected."""
        return tuple((z, bool(c)) for z, c in zip(self.bits, self.codes[k]))


def encode_disjunction(polytopes, codes=None, builder: Builder = None, x_vars=None, name: str = "d",
                       forbid_unused: bool = True, x_bounds=None) -> Disjunction:
    """Vertex-weight encoding of ``x in union(polytopes)`` with log2 binaries.

    Emits ``x = sum lam v`` and ``sum lam = 1`` plus, per polytope ``i``,
    ``sum_{k != i} sum_j lam_kj <= sum_l |z_l - code_i,l|``, and one row
    ``sum_l |z_l - c_l| >= 1`` per unused code ``c``.  Without a builder a
    standalone program over ``(x, lam, z)`` is built.
    """
    polys = [np.atleast_2d(np.asarray(p, dtype=float)) for p in polytopes]
    if not polys:
        raise EmptyRestriction("no polytopes")
    dim = polys[0].shape[1]
    if any(p.shape[1] != dim for p in polys):
        raise EnvelopeError("polytopes of mixed dimension")
    n = len(polys)
    m = n_bits(n)
    codes = [tuple(int(b) for b in c) for c in (codes if codes is not None else gray_codes(n))]
    if len(codes) != n or any(len(c) != m for c in codes) or len(set(codes)) != n:
        raise CodeCollision("codes must be distinct with ceil(log2 N) bits each")

    standalone = builder is None
    if standalone:
        builder = Builder()
        allv = np.vstack(polys)
        lo = allv.min(0) if x_bounds is None else np.asarray(x_bounds[0])
        hi = allv.max(0) if x_bounds is None else np.asarray(x_bounds[1])
        x_vars = tuple(builder.var(f"{name}.x[{d}]", CONTINUOUS, lo[d], hi[d], "x") for d in range(dim))
    x_vars = tuple(x_vars)
    if len(x_vars) != dim:
        raise EnvelopeError("x_vars do not match polytope dimension")

    first = len(builder.constraints)
    lam = [[builder.var(f"{name}.lam[{i},{j}]", CONTINUOUS, 0.0, 1.0, "lambda") for j in range(len(p))]
           for i, p in enumerate(polys)]
    bits = [builder.var(f"{name}.z[{b}]", BINARY, 0, 1, "grid") for b in range(m)]
    d = Disjunction(x_vars, polys, codes, bits, lam)

    for k in range(dim):  # (5.a)
        terms = [(x_vars[k], -1.0)]
        for i, p in enumerate(polys):
            terms += [(lam[i][j], float(p[j, k])) for j in range(len(p))]
        builder.add(f"{name}.hull[{k}]", terms, sense=EQ, rhs=0.0, family="DJ")
    builder.add(f"{name}.sum", [(l, 1.0) for row in lam for l in row], sense=EQ, rhs=1.0, family="DJ")  # (5.b)
    for i in range(n):  # (5.c)
        if m == 0:
            break
        dev, const = d.deviation_terms(codes[i])
        terms = [(l, 1.0) for k, row in enumerate(lam) if k != i for l in row]
        terms += [(z, -c) for z, c in dev]
        builder.add(f"{name}.sel[{i}]", terms, rhs=const, family="DJ")
    if forbid_unused:
        used = set(codes)
        for c in cartesian((0, 1), repeat=m):
            if c in used:
                continue
            dev, const = d.deviation_terms(c)
            builder.add(f"{name}.forbid[{''.join(map(str, c))}]", [(z, -cf) for z, cf in dev],
                        rhs=const - 1.0, family="DJ")
    d.constraints = builder.constraints[first:]
    if standalone:
        d.program = builder.build()
    return d


# --- grids -------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    segments: int

    def __post_init__(self):
        if self.segments < 1:
            raise EnvelopeError("segments must be >= 1")
        if not self.lo < self.hi:
            raise DegenerateBounds(f"axis [{self.lo}, {self.hi}]")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.segments

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.segments + 1)

    def cell(self, k: int):
        e = self.edges()
        return float(e[k]), float(e[k + 1])

    def cell_of(self, value: float) -> int:
        """Cell containing ``value``; grid lines go to the lower cell, values are clamped."""
        r = (float(value) - self.lo) / self.step
        k = int(math.ceil(r - 1e-12)) - 1
        return min(max(k, 0), self.segments - 1)


ANGLE = "theta"


def default_classes(W: float = 18.0, H: float = 11.0) -> dict:
    return {
        ANGLE: Axis(-0.5 * math.pi, 0.5 * math.pi, 8),
        "a": Axis(-1.0, 1.0, 8),
        "vx": Axis(-0.5 * W, 0.5 * W, 4),
        "vy": Axis(0.0, H, 4),
    }


@dataclass(frozen=True)
class Grid:
    """Per-class axes plus optional per-scalar restrictions to occupied cells.

    Scalars are keyed by variable name, angles by their pair key
    (``theta[i]``).  An angle's cells are ``(cos, sin)`` boxes of the theta
    intervals.
    """

    classes: Mapping
    restrict: Mapping = field(default_factory=dict)

    @classmethod
    def default(cls, W: float = 18.0, H: float = 11.0) -> "Grid":
        return cls(default_classes(W, H))

    def axis(self, key: str, cls_name: str) -> Axis:
        if key in self.classes:
            return self.classes[key]
        if cls_name in self.classes:
            return self.classes[cls_name]
        raise UncoveredVariable(f"no grid axis for {key} (class {cls_name!r})")

    def cells(self, key: str, cls_name: str) -> tuple:
        ax = self.axis(key, cls_name)
        if key in self.restrict:
            return tuple(self.restrict[key])
        return tuple(range(ax.segments))

    def position(self, key: str, cls_name: str, cell: int) -> int:
        """Index of ``cell`` within the scalar's cell list (the code position)."""
        cells = self.cells(key, cls_name)
        if cell in cells:
            return cells.index(cell)
        # outside a restriction: nearest occupied cell
        return int(np.argmin([abs(c - cell) for c in cells]))

    def code(self, key: str, cls_name: str, cell: int) -> tuple:
        cells = self.cells(key, cls_name)
        return gray_code(self.position(key, cls_name, cell), n_bits(len(cells)))

    # --- JSON
    def to_dict(self) -> dict:
        out = {k: {"range": [a.lo, a.hi], "segments": a.segments} for k, a in self.classes.items()}
        if self.restrict:
            out["restrict"] = {k: list(v) for k, v in self.restrict.items()}
        return out

    @classmethod
    def from_dict(cls, data: Mapping, W: float = 18.0, H: float = 11.0) -> "Grid":
        classes = dict(default_classes(W, H))
        restrict = {}
        for k, v in data.items():
            if k == "restrict":
                restrict = {kk: tuple(int(c) for c in vv) for kk, vv in v.items()}
                continue
            if set(v) - {"range", "segments"}:
                raise EnvelopeError(f"grid entry {k}: unknown fields")
            base = classes.get(k)
            lo, hi = v.get("range", [base.lo, base.hi] if base else [None, None])
            seg = v.get("segments", base.segments if base else None)
            if lo is None or seg is None:
                raise EnvelopeError(f"grid entry {k}: range and segments required")
            classes[k] = Axis(float(lo), float(hi), int(seg))
        return cls(classes, restrict)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, **kw) -> "Grid":
        return cls.from_dict(json.loads(text), **kw)


def restrict_grid(grid: Grid, occupied: Mapping) -> Grid:
    """Limit each listed scalar to its occupied cells (need not be contiguous)."""
    merged = dict(grid.restrict)
    for key, cells in occupied.items():
        cells = tuple(sorted({int(c) for c in cells}))
        if not cells:
            raise EmptyRestriction(f"{key}: no occupied cells")
        merged[key] = cells
    return Grid(grid.classes, merged)


def angle_box(lo: float, hi: float):
    """``(cos, sin)`` bounding box of ``theta in [lo, hi]`` (within [-pi/2, pi/2])."""
    cs = [math.cos(lo), math.cos(hi)]
    c_lo, c_hi = min(cs), max(cs)
    if lo <= 0.0 <= hi:
        c_hi = 1.0
    return (max(c_lo, 0.0), c_hi), (math.sin(lo), math.sin(hi))


# --- compilation -------------------------------------------------------------------

@dataclass
class GriddedScalar:
    key: str
    cls_name: str
    vars: tuple  # (x,) or (c, s) for angles
    cells: tuple  # grid cell indices in code order
    boxes: list  # per cell, per var (lo, hi)
    disjunction: Disjunction

    def box_of(self, var: int, k: int):
        return self.boxes[k][self.vars.index(var)]


@dataclass
class MicpProgram:
    program: MibpProgram
    base: MibpProgram
    grid: Grid
    scalars: dict  # key -> GriddedScalar
    products: dict  # (i, j) -> w index
    gaps: dict  # bilinear constraint name -> worst-case envelope gap

    @property
    def mode_binaries(self) -> int:
        return len(self.base.binaries)

    @property
    def grid_binaries(self) -> int:
        return sum(len(s.disjunction.bits) for s in self.scalars.values())

    @property
    def n_binaries(self) -> int:
        return len(self.program.binaries)

    @property
    def tolerance(self) -> float:
        return max(self.gaps.values(), default=0.0)

    def scalar_of(self, var: int) -> Optional[GriddedScalar]:
        for s in self.scalars.values():
            if var in s.vars:
                return s
        return None


def _scalar_table(program: MibpProgram, grid: Grid, needed: set) -> list:
    """Group needed variables into gridded scalars in variable order."""
    angle_of = {}
    for key, c, s in program.meta.get("angle_pairs", ()):
        angle_of[c] = angle_of[s] = (key, (c, s))
    out, done = [], set()
    for v in sorted(needed):
        if v in done:
            continue
        if v in angle_of:
            key, pair = angle_of[v]
            out.append((key, ANGLE, pair))
            done.update(pair)
        else:
            var = program.variables[v]
            out.append((var.name, var.tag, (v,)))
            done.add(v)
    return out


def compile_micp(program: MibpProgram, grid: Grid) -> MicpProgram:
    bil = program.bilinear_constraints()
    if not bil:
        return MicpProgram(program, program, grid, {}, {}, {})

    terms = set()
    for con in bil:
        for i, j, _ in con.bilinear:
            terms.add((min(i, j), max(i, j)))
    needed = {v for t in terms for v in t}
    table = _scalar_table(program, grid, needed)

    pb = Builder()
    for v in program.variables:
        pb.var(v.name, v.kind, v.lo, v.hi, v.tag)

    # cell boxes and bound tightening to the grid
    scalar_specs = []
    for key, cls_name, vars_ in table:
        ax = grid.axis(key, cls_name)
        cells = grid.cells(key, cls_name)
        if not cells:
            raise EmptyRestriction(key)
        boxes = []
        for k in cells:
            lo, hi = ax.cell(k)
            if cls_name == ANGLE and len(vars_) == 2:
                boxes.append(angle_box(lo, hi))
            else:
                boxes.append(((lo, hi),))
        for d, v in enumerate(vars_):
            lo = min(b[d][0] for b in boxes)
            hi = max(b[d][1] for b in boxes)
            old = pb.variables[v]
            pb.variables[v] = replace(old, lo=max(old.lo, lo), hi=min(old.hi, hi))
            if pb.variables[v].lo > pb.variables[v].hi:
                raise EmptyRestriction(f"{key}: grid misses the variable bounds")
        scalar_specs.append((key, cls_name, vars_, cells, boxes))
    pb._bounds = None

    products = {}
    for i, j in sorted(terms):
        vi, vj = pb.variables[i], pb.variables[j]
        if i == j:
            sq = [vi.lo ** 2, vi.hi ** 2]
            lo = 0.0 if vi.lo <= 0.0 <= vi.hi else min(sq)
            hi = max(sq)
        else:
            cands = [a * b for a in (vi.lo, vi.hi) for b in (vj.lo, vj.hi)]
            lo, hi = min(cands), max(cands)
        products[(i, j)] = pb.var(f"w[{vi.name}*{vj.name}]", CONTINUOUS, lo, hi, "product")

    scalars = {}
    for key, cls_name, vars_, cells, boxes in scalar_specs:
        polys = [np.array(list(cartesian(*b)), dtype=float) for b in boxes]
        d = encode_disjunction(polys, builder=pb, x_vars=vars_, name=f"grid[{key}]")
        scalars[key] = GriddedScalar(key, cls_name, vars_, cells, boxes, d)
    by_var = {v: s for s in scalars.values() for v in s.vars}

    # carry over all non-bilinear rows; rewrite bilinear rows through w
    for con in program.constraints:
        if con.kind != "bilinear":
            pb.constraints.append(con)
            continue
        lin = list(con.linear)
        lin += [(products[(min(i, j), max(i, j))], c) for i, j, c in con.bilinear]
        pb.add(con.name, lin, (), con.sense, con.rhs, con.family, con.guard)

    # McCormick rows per product and cell pair
    gaps_term = {}
    for (i, j), w in products.items():
        si, sj = by_var[i], by_var[j]
        worst = 0.0
        pairs = [(k, k) for k in range(len(si.cells))] if si is sj else \
            [(a, b) for a in range(len(si.cells)) for b in range(len(sj.cells))]
        for a, b in pairs:
            xb, yb = si.box_of(i, a), sj.box_of(j, b)
            guard = si.disjunction.literals(a) + (() if si is sj else sj.disjunction.literals(b))
            for r, (tms, rhs) in enumerate(mccormick(w, i, j, xb, yb)):
                pb.add(f"MC[{w},{a},{b},{r}]", tms, rhs=rhs, family="MC", guard=guard)
            worst = max(worst, (xb[1] - xb[0]) * (yb[1] - yb[0]) / 4.0)
        gaps_term[(i, j)] = worst

    gaps = {con.name: sum(abs(c) * gaps_term[(min(i, j), max(i, j))] for i, j, c in con.bilinear) for con in bil}
    meta = dict(program.meta)
    meta["micp"] = True
    compiled = pb.build(program.objective, program.theta, meta)
    return MicpProgram(compiled, program, grid, scalars, products, gaps)


def assignment_for_point(micp: MicpProgram, x_base, modes_from=None) -> dict:
    """Binary assignment ``{var: 0/1}`` of the compiled program for a base-program point.

    Mode binaries are rounded from ``x_base``; grid binaries take the Gray
    code of the cell containing each gridded scalar (angles via atan2).
    """
    x = np.asarray(x_base, dtype=float)
    out = {int(b): float(round(x[b])) for b in micp.base.binaries}
    for s in micp.scalars.values():
        cell = cell_of_scalar(micp, s, x)
        code = micp.grid.code(s.key, s.cls_name, cell)
        for z, c in zip(s.disjunction.bits, code):
            out[z] = float(c)
    return out


def cell_of_scalar(micp: MicpProgram, s: GriddedScalar, x) -> int:
    ax = micp.grid.axis(s.key, s.cls_name)
    if s.cls_name == ANGLE and len(s.vars) == 2:
        value = math.atan2(x[s.vars[1]], x[s.vars[0]])
    else:
        value = x[s.vars[0]]
    return ax.cell_of(value)


def lift_point(micp: MicpProgram, x_base) -> np.ndarray:
    """Extend a base-program point with products, weights and grid bits.

    Products take their exact values, which lie inside every envelope
    containing the point.
    """
    x = np.asarray(x_base, dtype=float)
    full = np.zeros(micp.program.n)
    full[: micp.base.n] = x
    for (i, j), w in micp.products.items():
        full[w] = x[i] * x[j]
    for z, v in assignment_for_point(micp, x).items():
        full[z] = v
    for s in micp.scalars.values():
        cell = cell_of_scalar(micp, s, x)
        k = micp.grid.position(s.key, s.cls_name, cell)
        box = s.boxes[k]
        # multilinear weights of the point inside its box
        t = []
        for d, v in enumerate(s.vars):
            lo, hi = box[d]
            t.append(0.0 if hi <= lo else min(max((x[v] - lo) / (hi - lo), 0.0), 1.0))
        for jv, corner in enumerate(cartesian(*[(0, 1)] * len(s.vars))):
            wgt = 1.0
            for d, bit in enumerate(corner):
                wgt *= t[d] if bit else 1.0 - t[d]
            full[s.disjunction.lam[k][jv]] = wgt
    return full
