"""Bookshelf insertion model: geometry, instances, MINLP and feasibility oracle.

Conventions
-----------
* The shelf spans ``x in [-W/2, W/2]`` and ``y in [0, H]``.
* A book's pose is its centroid ``(x, y)`` and angle ``theta``; the rotation
  is ``R = [[c, -s], [s, c]]`` (counter-clockwise positive).
* Body-frame corners: v1 top-right, v2 bottom-right, v3 bottom-left,
  v4 top-left.
* Stored books keep their left-to-right order; the inserted book occupies
  one of ``N`` slots chosen by one-hot binaries.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import kernels
from .program import EQ, LE, Builder, MibpProgram, Quadratic

HALF_PI = 0.5 * math.pi
LEAN_MARGIN = 1e-3


class ModelError(ValueError):
    pass


class GenerationFailed(RuntimeError):
    pass


class Mode(enum.IntEnum):
    LAY_LEFT = 0
    UPRIGHT = 1
    LAY_RIGHT = 2
    LEAN_LEFT = 3
    LEAN_RIGHT = 4

    @property
    def leaning(self) -> bool:
        return self in (Mode.LEAN_LEFT, Mode.LEAN_RIGHT)

    def mirrored(self) -> "Mode":
        return {Mode.LAY_LEFT: Mode.LAY_RIGHT, Mode.LAY_RIGHT: Mode.LAY_LEFT,
                Mode.LEAN_LEFT: Mode.LEAN_RIGHT, Mode.LEAN_RIGHT: Mode.LEAN_LEFT}.get(self, self)


N_MODES = len(Mode)
Support = Union[int, str, None]  # book index, "wall", "insert" (stored books only), or None


@dataclass(frozen=True)
class ShelfSpec:
    W: float = 18.0
    H: float = 11.0

    def __post_init__(self):
        if not (self.W > 0 and self.H > 0):
            raise ModelError("shelf dimensions must be positive")


@dataclass(frozen=True)
class BookSpec:
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ModelError("book dimensions must be positive")

    def corners(self) -> np.ndarray:
        """Body-frame offsets of v1..v4."""
        a, b = 0.5 * self.w, 0.5 * self.h
        return np.array([[a, b], [a, -b], [-a, -b], [-a, b]])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])


def vertices(book: BookSpec, pose: Pose) -> np.ndarray:
    """World vertices v1..v4, shape (4, 2)."""
    return np.array([pose.x, pose.y]) + book.corners() @ pose.rotation.T


@dataclass(frozen=True)
class StoredBook:
    book: BookSpec
    pose: Pose
    mode: Mode = Mode.UPRIGHT
    support: Support = None


@dataclass(frozen=True)
class ProblemInstance:
    shelf: ShelfSpec
    stored: tuple
    insert: BookSpec

    def __post_init__(self):
        xs = [s.pose.x for s in self.stored]
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise ModelError("stored books must be ordered left to right")
        for k, s in enumerate(self.stored):
            if s.mode.leaning:
                if s.support is None:
                    raise ModelError("leaning book needs a support")
                if s.support == k:
                    raise ModelError("book cannot support itself")

    @property
    def n_books(self) -> int:
        return len(self.stored) + 1

    @property
    def books(self) -> tuple:
        return tuple(s.book for s in self.stored) + (self.insert,)

    def theta(self) -> np.ndarray:
        """Parameter vector: (x, y, theta, w, h) per stored book, then (w, h) of the insert."""
        vals = []
        for s in self.stored:
            vals += [s.pose.x, s.pose.y, s.pose.theta, s.book.w, s.book.h]
        vals += [self.insert.w, self.insert.h]
        return np.array(vals, dtype=float)

    # --- JSON -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "shelf": {"W": self.shelf.W, "H": self.shelf.H},
            "stored": [
                {"w": s.book.w, "h": s.book.h, "x": s.pose.x, "y": s.pose.y, "theta": s.pose.theta,
                 "mode": s.mode.name.lower(), "support": s.support}
                for s in self.stored
            ],
            "insert": {"w": self.insert.w, "h": self.insert.h},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProblemInstance":
        _check_keys(data, {"shelf", "stored", "insert"}, "instance")
        _check_keys(data["shelf"], {"W", "H"}, "shelf")
        _check_keys(data["insert"], {"w", "h"}, "insert")
        stored = []
        for rec in data["stored"]:
            _check_keys(rec, {"w", "h", "x", "y", "theta", "mode", "support"}, "stored book",
                        optional={"mode", "support"})
            stored.append(StoredBook(
                BookSpec(float(rec["w"]), float(rec["h"])),
                Pose(float(rec["x"]), float(rec["y"]), float(rec["theta"])),
                Mode[str(rec.get("mode", "upright")).upper()],
                rec.get("support"),
            ))
        order = sorted(range(len(stored)), key=lambda k: stored[k].pose.x)
        remap = {old: new for new, old in enumerate(order)}
        stored = [stored[k] for k in order]
        stored = [StoredBook(s.book, s.pose, s.mode, remap.get(s.support, s.support)
                             if isinstance(s.support, int) else s.support) for s in stored]
        return cls(ShelfSpec(float(data["shelf"]["W"]), float(data["shelf"]["H"])), tuple(stored),
                   BookSpec(float(data["insert"]["w"]), float(data["insert"]["h"])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ProblemInstance":
        return cls.from_dict(json.loads(text))


def _check_keys(data, allowed, what, optional=frozenset()):
    if not isinstance(data, Mapping):
        raise ModelError(f"{what}: expected an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ModelError(f"{what}: unknown fields {sorted(unknown)}")
    missing = set(allowed) - set(optional) - set(data)
    if missing:
        raise ModelError(f"{what}: missing fields {sorted(missing)}")


@dataclass(frozen=True)
class BookshelfSolution:
    """Poses and modes for all books (stored first, insert last)."""

    poses: tuple
    modes: tuple
    supports: tuple
    planes: tuple = ()  # ((i, j), (ax, ay), b) per pair
    slot: int = 0
    objective: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "poses": [[p.x, p.y, p.theta] for p in self.poses],
            "modes": [m.name.lower() for m in self.modes],
            "supports": list(self.supports),
            "planes": [[list(ij), list(a), b] for ij, a, b in self.planes],
            "slot": self.slot,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BookshelfSolution":
        return cls(
            tuple(Pose(*map(float, p)) for p in data["poses"]),
            tuple(Mode[m.upper()] for m in data["modes"]),
            tuple(data["supports"]),
            tuple((tuple(ij), tuple(a), float(b)) for ij, a, b in data.get("planes", [])),
            int(data.get("slot", 0)),
            float(data.get("objective", float("nan"))),
        )


def reference_solution(instance: ProblemInstance, insert_pose: Pose, insert_mode: Mode,
                       insert_support: Support, slot: int, w_theta: float = 10.0) -> BookshelfSolution:
    """Scene with stored books unmoved and the insert at a given pose."""
    poses = tuple(s.pose for s in instance.stored) + (insert_pose,)
    modes = tuple(s.mode for s in instance.stored) + (insert_mode,)
    supports = list(_stored_supports_in_full(instance, slot)) + [insert_support]
    sol = BookshelfSolution(poses, modes, tuple(supports), (), slot)
    sol = with_planes(instance, sol)
    return BookshelfSolution(sol.poses, sol.modes, sol.supports, sol.planes, slot,
                             objective_value(instance, sol, w_theta))


def _stored_supports_in_full(instance, slot):
    # stored supports index the stored list; the full ordering keeps stored
    # indices and appends the insert, so they carry over unchanged
    n = len(instance.stored)
    return [n if s.support == "insert" else s.support for s in instance.stored]


# --- objective ---------------------------------------------------------------

def objective_value(instance: ProblemInstance, solution: BookshelfSolution, w_theta: float = 10.0) -> float:
    """Squared displacement of stored books plus weighted squared rotation."""
    cost = 0.0
    for s, p in zip(instance.stored, solution.poses):
        cost += (p.x - s.pose.x) ** 2 + (p.y - s.pose.y) ** 2 + w_theta * (p.theta - s.pose.theta) ** 2
    return float(cost)


# --- separating planes ---------------------------------------------------------

def max_margin_plane(va: np.ndarray, vb: np.ndarray):
    """Unit normal ``a`` and offset ``b`` with ``a.va <= b <= a.vb``, max margin.

    Candidate normals are the edge normals of both polygons (optimal for
    convex polygons); ties keep the first.  Returns ``(a, b, margin)``.
    """
    best = None
    for poly in (va, vb):
        for k in range(len(poly)):
            e = poly[(k + 1) % len(poly)] - poly[k]
            nrm = np.array([e[1], -e[0]])
            nrm /= max(np.linalg.norm(nrm), 1e-300)
            for a in (nrm, -nrm):
                hi_a = float(np.max(va @ a))
                lo_b = float(np.min(vb @ a))
                margin = lo_b - hi_a
                if best is None or margin > best[2] + 1e-12:
                    best = (a, 0.5 * (hi_a + lo_b), margin)
    a, b, margin = best
    return (float(a[0]), float(a[1])), float(b), float(margin)


def pairs(n_books: int):
    return list(combinations(range(n_books), 2))


def with_planes(instance: ProblemInstance, sol: BookshelfSolution) -> BookshelfSolution:
    books = instance.books
    verts = [vertices(b, p) for b, p in zip(books, sol.poses)]
    planes = []
    for i, j in pairs(len(books)):
        a, b, _ = max_margin_plane(verts[i], verts[j])
        planes.append(((i, j), a, b))
    return BookshelfSolution(sol.poses, sol.modes, sol.supports, tuple(planes), sol.slot, sol.objective)


# --- ordering ------------------------------------------------------------------

def full_order(n_stored: int, slot: int) -> list:
    """Left-to-right book indices when the insert (index n_stored) takes ``slot``."""
    order = list(range(n_stored))
    order.insert(slot, n_stored)
    return order


def neighbours(n_stored: int, slot: int):
    """Map book -> (left neighbour or 'wall', right neighbour or 'wall')."""
    order = full_order(n_stored, slot)
    out = {}
    for k, b in enumerate(order):
        left = order[k - 1] if k > 0 else "wall"
        right = order[k + 1] if k + 1 < len(order) else "wall"
        out[b] = (left, right)
    return out


def _adjacency_literals(n_stored: int, slot_vars: Sequence[int]):
    """Yield ``(book, side, support, literal)``: ``support`` is adjacent on ``side``
    exactly when the literal holds."""
    S = n_stored
    ins = S
    q = slot_vars
    for r in range(S):
        # left side of stored r
        if r == 0:
            yield r, "left", "wall", (q[0], False)
        else:
            yield r, "left", r - 1, (q[r], False)
        yield r, "left", ins, (q[r], True)
        # right side of stored r
        if r == S - 1:
            yield r, "right", "wall", (q[S], False)
        else:
            yield r, "right", r + 1, (q[r + 1], False)
        yield r, "right", ins, (q[r + 1], True)
    for t in range(S + 1):
        yield ins, "left", ("wall" if t == 0 else t - 1), (q[t], True)
        yield ins, "right", ("wall" if t == S else t), (q[t], True)


# --- MINLP -----------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    w_theta: float = 10.0
    lean_margin: float = LEAN_MARGIN


@dataclass
class Layout:
    """Variable indices of a bookshelf program."""

    n_books: int
    px: list = field(default_factory=list)
    py: list = field(default_factory=list)
    c: list = field(default_factory=list)
    s: list = field(default_factory=list)
    vx: list = field(default_factory=list)  # [book][k]
    vy: list = field(default_factory=list)
    z: list = field(default_factory=list)  # [book][mode]
    q: list = field(default_factory=list)  # slots
    pairs: list = field(default_factory=list)
    ax: dict = field(default_factory=dict)
    ay: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)

    def nonconvex_indices(self) -> list:
        """Continuous coordinates carrying the nonconvexity: angles via (c, s),
        plane normals and vertices."""
        out = []
        for i in range(self.n_books):
            out.append(("theta", i, (self.c[i], self.s[i])))
        for p in self.pairs:
            out.append(("a", p, (self.ax[p],)))
            out.append(("a", p, (self.ay[p],)))
        for i in range(self.n_books):
            for k in range(4):
                out.append(("vx", (i, k), (self.vx[i][k],)))
                out.append(("vy", (i, k), (self.vy[i][k],)))
        return out

    def mode_indices(self) -> list:
        return [z for row in self.z for z in row]


def build_minlp(instance: ProblemInstance, config: ModelConfig = ModelConfig()) -> MibpProgram:
    shelf = instance.shelf
    W2, H = 0.5 * shelf.W, shelf.H
    N = instance.n_books
    S = N - 1
    books = instance.books
    bmax = math.hypot(W2, H)
    sd = math.sin(config.lean_margin)
    pb = Builder()
    L = Layout(N)

    for i in range(N):
        L.px.append(pb.var(f"px[{i}]", lo=-W2, hi=W2, tag="px"))
        L.py.append(pb.var(f"py[{i}]", lo=0.0, hi=H, tag="py"))
        L.c.append(pb.var(f"c[{i}]", lo=0.0, hi=1.0, tag="theta"))
        L.s.append(pb.var(f"s[{i}]", lo=-1.0, hi=1.0, tag="theta"))
        L.vx.append([pb.var(f"vx[{i},{k + 1}]", lo=-W2, hi=W2, tag="vx") for k in range(4)])
        L.vy.append([pb.var(f"vy[{i},{k + 1}]", lo=0.0, hi=H, tag="vy") for k in range(4)])
    for i in range(N):
        L.z.append([pb.var(f"z[{i},{m.name.lower()}]", "binary", 0, 1, tag="mode") for m in Mode])
    L.q = [pb.var(f"q[{t}]", "binary", 0, 1, tag="slot") for t in range(S + 1)]
    for p in pairs(N):
        L.pairs.append(p)
        L.ax[p] = pb.var(f"ax[{p[0]},{p[1]}]", lo=-1.0, hi=1.0, tag="a")
        L.ay[p] = pb.var(f"ay[{p[0]},{p[1]}]", lo=-1.0, hi=1.0, tag="a")
        L.b[p] = pb.var(f"b[{p[0]},{p[1]}]", lo=-bmax, hi=bmax, tag="b")

    for i, book in enumerate(books):
        px, py, c, s = L.px[i], L.py[i], L.c[i], L.s[i]
        # A: v = p + R h
        for k, (hx, hy) in enumerate(book.corners()):
            pb.add(f"A[{i},{k + 1},x]", [(L.vx[i][k], 1), (px, -1), (c, -hx), (s, hy)], sense=EQ, family="A")
            pb.add(f"A[{i},{k + 1},y]", [(L.vy[i][k], 1), (py, -1), (s, -hx), (c, -hy)], sense=EQ, family="A")
        # B: containment
        for k in range(4):
            pb.add(f"B[{i},{k + 1},xr]", [(L.vx[i][k], 1)], rhs=W2, family="B")
            pb.add(f"B[{i},{k + 1},xl]", [(L.vx[i][k], -1)], rhs=W2, family="B")
            pb.add(f"B[{i},{k + 1},yb]", [(L.vy[i][k], -1)], rhs=0.0, family="B")
            pb.add(f"B[{i},{k + 1},yt]", [(L.vy[i][k], 1)], rhs=H, family="B")
        # C: R'R = I  <=>  c^2 + s^2 = 1
        pb.add(f"C[{i}]", bilinear=[(c, c, 1), (s, s, 1)], sense=EQ, rhs=1.0, family="C")
        # D: theta in [-pi/2, pi/2]  <=>  c >= 0
        pb.add(f"D[{i}]", [(c, -1)], rhs=0.0, family="D")
        # G: one mode
        pb.add(f"G[{i}]", [(z, 1) for z in L.z[i]], sense=EQ, rhs=1.0, family="G")

        z = L.z[i]
        # I1 upright, J1 lay left (+pi/2), H1 lay right (-pi/2)
        for fam, m, cv, sv, yv in (("I1", Mode.UPRIGHT, 1.0, 0.0, 0.5 * book.h),
                                   ("J1", Mode.LAY_LEFT, 0.0, 1.0, 0.5 * book.w),
                                   ("H1", Mode.LAY_RIGHT, 0.0, -1.0, 0.5 * book.w)):
            g = [(z[m], True)]
            pb.add(f"{fam}[{i},c]", [(c, 1)], sense=EQ, rhs=cv, family=fam, guard=g)
            pb.add(f"{fam}[{i},s]", [(s, 1)], sense=EQ, rhs=sv, family=fam, guard=g)
            pb.add(f"{fam}[{i},y]", [(py, 1)], sense=EQ, rhs=yv, family=fam, guard=g)
        # lean angle windows, ground contact of the pivot corner
        gl = [(z[Mode.LEAN_LEFT], True)]
        gr = [(z[Mode.LEAN_RIGHT], True)]
        pb.add(f"K0[{i},s]", [(s, -1)], rhs=-sd, family="K0", guard=gl)
        pb.add(f"K0[{i},c]", [(c, -1)], rhs=-sd, family="K0", guard=gl)
        pb.add(f"L0[{i},s]", [(s, 1)], rhs=-sd, family="L0", guard=gr)
        pb.add(f"L0[{i},c]", [(c, -1)], rhs=-sd, family="L0", guard=gr)
        pb.add(f"K3[{i}]", [(L.vy[i][2], 1)], sense=EQ, rhs=0.0, family="K3", guard=gl)
        pb.add(f"L3[{i}]", [(L.vy[i][1], 1)], sense=EQ, rhs=0.0, family="L3", guard=gr)

    # separating planes
    for p in L.pairs:
        i, j = p
        ax, ay, b = L.ax[p], L.ay[p], L.b[p]
        for k in range(4):
            pb.add(f"E[{i},{j}|{i},{k + 1}]", [(b, -1)], [(ax, L.vx[i][k], 1), (ay, L.vy[i][k], 1)],
                   rhs=0.0, family="E")
            pb.add(f"E[{i},{j}|{j},{k + 1}]", [(b, 1)], [(ax, L.vx[j][k], -1), (ay, L.vy[j][k], -1)],
                   rhs=0.0, family="E")
        pb.add(f"F[{i},{j}]", bilinear=[(ax, ax, 1), (ay, ay, 1)], sense=EQ, rhs=1.0, family="F")

    # ordering: stored books keep order, insert sits in its slot
    ins = S
    for r in range(S - 1):
        pb.add(f"O[{r}<{r + 1}]", [(L.px[r], 1), (L.px[r + 1], -1)], rhs=0.0, family="O")
    pb.add("O[slot]", [(q, 1) for q in L.q], sense=EQ, rhs=1.0, family="O")
    for t in range(S + 1):
        g = [(L.q[t], True)]
        if t >= 1:
            pb.add(f"O[slot{t},l]", [(L.px[t - 1], 1), (L.px[ins], -1)], rhs=0.0, family="O", guard=g)
        if t <= S - 1:
            pb.add(f"O[slot{t},r]", [(L.px[ins], 1), (L.px[t], -1)], rhs=0.0, family="O", guard=g)

    # lean supports: K (support on the left), L (support on the right)
    for i, side, sup, lit in _adjacency_literals(S, L.q):
        if side == "left":
            g = [(L.z[i][Mode.LEAN_LEFT], True), lit]
            tag = f"{i}<-{sup}"
            if sup == "wall":
                pb.add(f"K1[{tag}]", [(L.vx[i][3], 1)], sense=EQ, rhs=-W2, family="K1", guard=g)
                pb.add(f"K2[{tag},r]", [(L.px[i], 1), (L.vx[i][2], -1)], rhs=0.0, family="K2", guard=g)
            else:
                p = (min(i, sup), max(i, sup))
                ax, ay, b = L.ax[p], L.ay[p], L.b[p]
                pb.add(f"K1[{tag},j]", [(b, -1)], [(ax, L.vx[sup][0], 1), (ay, L.vy[sup][0], 1)],
                       sense=EQ, family="K1", guard=g)
                pb.add(f"K1[{tag},i]", [(b, -1)], [(ax, L.vx[i][3], 1), (ay, L.vy[i][3], 1)],
                       sense=EQ, family="K1", guard=g)
                pb.add(f"K2[{tag},l]", [(L.px[sup], 1), (L.px[i], -1)], rhs=0.0, family="K2", guard=g)
                pb.add(f"K2[{tag},r]", [(L.px[i], 1), (L.vx[i][2], -1)], rhs=0.0, family="K2", guard=g)
        else:
            g = [(L.z[i][Mode.LEAN_RIGHT], True), lit]
            tag = f"{i}->{sup}"
            if sup == "wall":
                pb.add(f"L1[{tag}]", [(L.vx[i][0], 1)], sense=EQ, rhs=W2, family="L1", guard=g)
                pb.add(f"L2[{tag},l]", [(L.vx[i][1], 1), (L.px[i], -1)], rhs=0.0, family="L2", guard=g)
            else:
                p = (min(i, sup), max(i, sup))
                ax, ay, b = L.ax[p], L.ay[p], L.b[p]
                pb.add(f"L1[{tag},i]", [(b, -1)], [(ax, L.vx[i][0], 1), (ay, L.vy[i][0], 1)],
                       sense=EQ, family="L1", guard=g)
                pb.add(f"L1[{tag},j]", [(b, -1)], [(ax, L.vx[sup][3], 1), (ay, L.vy[sup][3], 1)],
                       sense=EQ, family="L1", guard=g)
                pb.add(f"L2[{tag},l]", [(L.vx[i][1], 1), (L.px[i], -1)], rhs=0.0, family="L2", guard=g)
                pb.add(f"L2[{tag},r]", [(L.px[i], 1), (L.px[sup], -1)], rhs=0.0, family="L2", guard=g)

    # objective: displacement of stored books; rotation measured on (c, s)
    quad, lin, const = [], [], 0.0
    for i, st in enumerate(instance.stored):
        c0, s0 = math.cos(st.pose.theta), math.sin(st.pose.theta)
        for var, ref, wt in ((L.px[i], st.pose.x, 1.0), (L.py[i], st.pose.y, 1.0),
                             (L.c[i], c0, config.w_theta), (L.s[i], s0, config.w_theta)):
            quad.append((var, var, wt))
            lin.append((var, -2.0 * wt * ref))
            const += wt * ref * ref
    meta = {"layout": L, "instance": instance, "config": config,
            "angle_pairs": [(f"theta[{i}]", L.c[i], L.s[i]) for i in range(N)]}
    return pb.build(Quadratic(tuple(quad), tuple(lin), const), instance.theta(), meta)


def layout_of(program: MibpProgram) -> Layout:
    return program.meta["layout"]


# --- point <-> solution --------------------------------------------------------

def solution_from_point(instance: ProblemInstance, program: MibpProgram, x, w_theta: Optional[float] = None,
                        modes=None) -> BookshelfSolution:
    L = layout_of(program)
    x = np.asarray(x, dtype=float)
    if w_theta is None:
        w_theta = program.meta.get("config", ModelConfig()).w_theta
    N = L.n_books
    S = N - 1
    poses = tuple(Pose(float(x[L.px[i]]), float(x[L.py[i]]), math.atan2(x[L.s[i]], x[L.c[i]]))
                  for i in range(N))
    if modes is None:
        modes = tuple(Mode(int(np.argmax([x[z] for z in L.z[i]]))) for i in range(N))
    slot = int(np.argmax([x[q] for q in L.q]))
    nb = neighbours(S, slot)
    supports = []
    for i, m in enumerate(modes):
        if m == Mode.LEAN_LEFT:
            supports.append(nb[i][0])
        elif m == Mode.LEAN_RIGHT:
            supports.append(nb[i][1])
        else:
            supports.append(None)
    planes = tuple((p, (float(x[L.ax[p]]), float(x[L.ay[p]])), float(x[L.b[p]])) for p in L.pairs)
    sol = BookshelfSolution(poses, tuple(modes), tuple(supports), planes, slot)
    return BookshelfSolution(poses, tuple(modes), tuple(supports), planes, slot,
                             objective_value(instance, sol, w_theta))


def point_from_solution(program: MibpProgram, solution: BookshelfSolution, instance=None) -> np.ndarray:
    L = layout_of(program)
    instance = instance or program.meta["instance"]
    x = np.zeros(program.n)
    for i, (book, pose) in enumerate(zip(instance.books, solution.poses)):
        x[L.px[i]], x[L.py[i]] = pose.x, pose.y
        x[L.c[i]], x[L.s[i]] = math.cos(pose.theta), math.sin(pose.theta)
        v = vertices(book, pose)
        for k in range(4):
            x[L.vx[i][k]], x[L.vy[i][k]] = v[k]
        x[L.z[i][int(solution.modes[i])]] = 1.0
    x[L.q[solution.slot]] = 1.0
    planes = {tuple(ij): (a, b) for ij, a, b in solution.planes}
    if not planes:
        planes = {ij: (a, b) for ij, a, b in with_planes(instance, solution).planes}
    for p in L.pairs:
        (ax, ay), b = planes[p]
        x[L.ax[p]], x[L.ay[p]], x[L.b[p]] = ax, ay, b
    return np.clip(x, program.lo, program.hi)


# --- oracle ----------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityReport:
    violations: dict
    tol: float

    @property
    def max_violation(self) -> float:
        return max(self.violations.values()) if self.violations else 0.0

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    def failing(self) -> list:
        return [k for k, v in self.violations.items() if v > self.tol]


def _point_segment_side(p, a, b):
    d = b - a
    return d[0] * (p[..., 1] - a[1]) - d[1] * (p[..., 0] - a[0])


def _contact_violation(v_lean: np.ndarray, corner: np.ndarray, v_sup: np.ndarray, sup_corner: np.ndarray):
    """How far the line through the two contact corners is from separating the books."""
    d = sup_corner - corner
    nd = np.linalg.norm(d)
    if nd < 1e-9:
        return 0.0
    nrm = np.array([-d[1], d[0]]) / nd
    s1 = (v_lean - corner) @ nrm
    s2 = (v_sup - corner) @ nrm
    # one book entirely on each side
    return float(min(max(0.0, s1.max()) + max(0.0, -s2.min()), max(0.0, -s1.min()) + max(0.0, s2.max())))


def check_solution(instance: ProblemInstance, solution: BookshelfSolution, tol: float = 1e-4,
                   lean_margin: float = LEAN_MARGIN) -> FeasibilityReport:
    """Geometric feasibility, computed from poses alone (plane variables unused)."""
    books = instance.books
    N = len(books)
    if len(solution.poses) != N or len(solution.modes) != N:
        raise ModelError("solution does not match instance")
    W2, H = 0.5 * instance.shelf.W, instance.shelf.H
    verts = np.array([vertices(b, p) for b, p in zip(books, solution.poses)])
    viol = {"overlap": 0.0, "containment": 0.0, "mode_pose": 0.0, "stability": 0.0, "ground": 0.0,
            "contact": 0.0}

    prs = pairs(N)
    if prs:
        ia = np.array([i for i, _ in prs])
        ib = np.array([j for _, j in prs])
        pen = kernels.rect_penetration(verts[ia], verts[ib])
        viol["overlap"] = float(max(0.0, pen.max()))

    viol["containment"] = float(max(0.0, (verts[..., 0] - W2).max(), (-W2 - verts[..., 0]).max(),
                                    (-verts[..., 1]).max(), (verts[..., 1] - H).max()))

    mp = st = gr = ct = 0.0
    for i, (book, pose, mode) in enumerate(zip(books, solution.poses, solution.modes)):
        v = verts[i]
        gr = max(gr, float(v[:, 1].min()))  # every book touches the floor
        if mode == Mode.UPRIGHT:
            mp = max(mp, abs(pose.theta), abs(pose.y - 0.5 * book.h))
        elif mode == Mode.LAY_LEFT:
            mp = max(mp, abs(pose.theta - HALF_PI), abs(pose.y - 0.5 * book.w))
        elif mode == Mode.LAY_RIGHT:
            mp = max(mp, abs(pose.theta + HALF_PI), abs(pose.y - 0.5 * book.w))
        else:
            sup = solution.supports[i]
            if sup is None or sup == i:
                mp = max(mp, 1.0)
                continue
            if mode == Mode.LEAN_LEFT:
                mp = max(mp, lean_margin - pose.theta, pose.theta - (HALF_PI - lean_margin))
                pivot, corner, sup_corner_k = 2, 3, 0
                gr = max(gr, abs(v[pivot, 1]))
                sup_x = -W2 if sup == "wall" else solution.poses[sup].x
                st = max(st, sup_x - pose.x, pose.x - v[pivot, 0])
                if sup == "wall":
                    ct = max(ct, abs(v[corner, 0] + W2))
                else:
                    ct = max(ct, _contact_violation(v, v[corner], verts[sup], verts[sup][sup_corner_k]))
            else:
                mp = max(mp, pose.theta + lean_margin, -(HALF_PI - lean_margin) - pose.theta)
                pivot, corner, sup_corner_k = 1, 0, 3
                gr = max(gr, abs(v[pivot, 1]))
                sup_x = W2 if sup == "wall" else solution.poses[sup].x
                st = max(st, v[pivot, 0] - pose.x, pose.x - sup_x)
                if sup == "wall":
                    ct = max(ct, abs(v[corner, 0] - W2))
                else:
                    ct = max(ct, _contact_violation(v, v[corner], verts[sup], verts[sup][sup_corner_k]))
    viol["mode_pose"] = float(max(0.0, mp))
    viol["stability"] = float(max(0.0, st))
    viol["ground"] = float(max(0.0, gr))
    viol["contact"] = float(max(0.0, ct))
    return FeasibilityReport(viol, tol)


# --- instance generation -----------------------------------------------------------

DEFAULT_WIDTHS = (1.5, 4.0)
DEFAULT_HEIGHTS = (5.0, 10.0)
# uniform over the five modes: scenes are built with left-leaning books and
# mirrored half of the time, so LEAN_LEFT carries both lean modes' mass
DEFAULT_MODE_PROBS = {Mode.UPRIGHT: 0.2, Mode.LAY_LEFT: 0.2, Mode.LAY_RIGHT: 0.2, Mode.LEAN_LEFT: 0.4}


def _lean_pose(book: BookSpec, xr: float, hr: float, rng, margin: float) -> Optional[Pose]:
    """Pose leaning left onto a vertical face at ``x = xr`` of height ``hr``."""
    lo = max(math.atan2(book.w, book.h), math.acos(min(1.0, hr / book.h)), margin) + 0.03
    hi = HALF_PI - margin - 0.05
    if lo >= hi:
        return None
    th = float(rng.uniform(lo, hi))
    c, s = math.cos(th), math.sin(th)
    v3x = xr + s * book.h
    px = v3x + c * book.w / 2 - s * book.h / 2
    py = s * book.w / 2 + c * book.h / 2
    return Pose(px, py, th)


def _scene(shelf: ShelfSpec, books: list, modes: list, rng, margin: float):
    """Lay books out left to right; returns poses, modes, supports or None."""
    W2 = 0.5 * shelf.W
    n = len(books)
    # widths with zero gaps; lean-left items glue to the previous one
    glued = [m == Mode.LEAN_LEFT for m in modes]
    # first pass with zero gaps to measure
    def place(gaps):
        poses, sup = [], []
        cursor = -W2
        right_face = (-W2, shelf.H)  # wall
        for k, (b, m) in enumerate(zip(books, modes)):
            if m == Mode.LEAN_LEFT:
                pose = _lean_pose(b, right_face[0], right_face[1], rng_fixed[k], margin)
                if pose is None:
                    return None
                poses.append(pose)
                sup.append("wall" if k == 0 else k - 1)
                v = vertices(b, pose)
                cursor = float(v[:, 0].max())
                right_face = (cursor, -1.0)  # leaning books do not support others
                continue
            cursor += gaps[k]
            if m == Mode.UPRIGHT:
                half, height, th = 0.5 * b.w, b.h, 0.0
            else:
                half, height = 0.5 * b.h, b.w
                th = HALF_PI if m == Mode.LAY_LEFT else -HALF_PI
            poses.append(Pose(cursor + half, 0.5 * height, th))
            sup.append(None)
            cursor += 2 * half
            right_face = (cursor, height)
        return poses, sup, cursor

    seeds = rng.integers(0, 2**31, size=n)
    rng_fixed = [np.random.default_rng(int(sd)) for sd in seeds]
    res = place([0.0] * n)
    if res is None:
        return None
    _, _, end = res
    slack = W2 - end
    if slack < 0:
        return None
    free = [k for k in range(n) if not glued[k]]
    weights = rng.dirichlet(np.ones(len(free) + 1))
    gaps = [0.0] * n
    for k, wgt in zip(free, weights[:-1]):
        gaps[k] = slack * wgt
    rng_fixed = [np.random.default_rng(int(sd)) for sd in seeds]
    res = place(gaps)
    if res is None:
        return None
    poses, sup, _ = res
    return poses, modes, sup


def generate_scene(seed: int, shelf: ShelfSpec = ShelfSpec(), n_books: int = 4,
                   width_range=DEFAULT_WIDTHS, height_range=DEFAULT_HEIGHTS, mode_probs=None,
                   max_tries: int = 200, margin: float = LEAN_MARGIN):
    """Random feasible scene of ``n_books`` books, then one removed at random.

    Returns ``(instance, reference)`` where ``reference`` restores the removed
    book and is a feasible solution of the instance.
    """
    if n_books < 2:
        raise ModelError("need at least two books")
    rng = np.random.default_rng(seed)
    probs = dict(mode_probs or DEFAULT_MODE_PROBS)
    mode_list = list(probs)
    p = np.array([probs[m] for m in mode_list], dtype=float)
    p /= p.sum()
    for _ in range(max_tries):
        books = [BookSpec(float(rng.uniform(*width_range)), float(rng.uniform(*height_range)))
                 for _ in range(n_books)]
        modes = [mode_list[k] for k in rng.choice(len(mode_list), size=n_books, p=p)]
        for k, (b, m) in enumerate(zip(books, modes)):
            if m == Mode.UPRIGHT and b.h > shelf.H:
                modes[k] = Mode.LAY_LEFT
            if m in (Mode.LAY_LEFT, Mode.LAY_RIGHT) and (b.w > shelf.H or b.h > shelf.W):
                modes[k] = Mode.UPRIGHT
            if m == Mode.LEAN_LEFT and k > 0 and modes[k - 1] == Mode.LEAN_LEFT:
                modes[k] = Mode.UPRIGHT
        if any(b.h > shelf.H and b.w > shelf.H for b in books) or any(min(b.w, b.h) > shelf.H for b in books):
            continue
        scene = _scene(shelf, books, modes, rng, margin)
        if scene is None:
            continue
        poses, modes, sups = scene
        if rng.random() < 0.5:  # mirror to obtain right-leaning scenes
            poses = [Pose(-ps.x, ps.y, -ps.theta) for ps in poses][::-1]
            books = books[::-1]
            modes = [m.mirrored() for m in modes][::-1]
            sups = [None if s is None else ("wall" if s == "wall" else n_books - 1 - s) for s in sups][::-1]
        # any book may be removed; a stored book that leaned on it keeps its
        # pose and records the insert as its former support
        r = int(rng.integers(n_books))
        keep = [k for k in range(n_books) if k != r]
        remap = {old: new for new, old in enumerate(keep)}
        remap[r] = "insert"
        stored = tuple(StoredBook(books[k], poses[k], modes[k],
                                  remap[sups[k]] if isinstance(sups[k], int) else sups[k]) for k in keep)
        instance = ProblemInstance(shelf, stored, books[r])
        slot = sum(1 for k in keep if k < r)
        insert_support = sups[r]
        if isinstance(insert_support, int):
            insert_support = remap[insert_support]
        ref = reference_solution(instance, poses[r], modes[r], insert_support, slot)
        if not check_solution(instance, ref, tol=1e-7).passed:
            continue
        return instance, ref
    raise GenerationFailed(f"no feasible scene after {max_tries} attempts")


def generate_instance(seed: int, shelf: ShelfSpec = ShelfSpec(), n_books: int = 4, **kw) -> ProblemInstance:
    return generate_scene(seed, shelf, n_books, **kw)[0]
