"""Integer strategies and discretization of continuous solutions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..envelope import MicpProgram, cell_of_scalar
from ..program import EQ, ConvexProgram, fix_integers

INTEGRALITY_TOL = 1e-6
ACTIVE_TOL = 1e-6


class NonIntegralPoint(ValueError):
    pass


@dataclass(frozen=True)
class IntegerStrategy:
    z: dict  # mode/slot binary index -> 0/1
    n: dict  # grid binary index -> 0/1
    active: tuple  # names of inequalities with slack <= ACTIVE_TOL

    @property
    def assignment(self) -> dict:
        return {**self.z, **self.n}

    def by_name(self, program) -> dict:
        """Assignment keyed by variable name, portable across instances."""
        return {program.variables[k].name: v for k, v in self.assignment.items()}

    @classmethod
    def from_names(cls, program, names: dict) -> "IntegerStrategy":
        idx = program.index
        z, n = {}, {}
        base_bins = {v.name for v in program.variables if v.tag in ("mode", "slot")}
        for name, v in names.items():
            (z if name in base_bins else n)[idx[name]] = float(v)
        return cls(z, n, ())


def extract_strategy(micp: MicpProgram, x) -> IntegerStrategy:
    prog = micp.program
    x = np.asarray(x, dtype=float)
    base_bins = {int(b) for b in micp.base.binaries}
    z, n = {}, {}
    for b in prog.binaries:
        v = x[b]
        r = round(v)
        if abs(r - v) > INTEGRALITY_TOL:
            raise NonIntegralPoint(f"{prog.variables[b].name} = {v:.6g}")
        (z if int(b) in base_bins else n)[int(b)] = float(r)
    active = []
    for con in prog.constraints:
        if con.sense == EQ:
            continue
        if con.guard and con.guard_slack(x) > 0.5:
            continue
        if con.rhs - con.body(x) <= ACTIVE_TOL:
            active.append(con.name)
    return IntegerStrategy(z, n, tuple(active))


def strategy_program(micp: MicpProgram, strategy: IntegerStrategy) -> ConvexProgram:
    return fix_integers(micp.program, strategy.assignment)


def discretize_solution(micp: MicpProgram, x_base) -> tuple:
    """``(z, n)``: rounded mode binaries and Gray-coded grid cells of a base point."""
    x = np.asarray(x_base, dtype=float)
    z = {int(b): float(round(x[b])) for b in micp.base.binaries}
    n = {}
    for s in micp.scalars.values():
        cell = cell_of_scalar(micp, s, x)
        for bit, c in zip(s.disjunction.bits, micp.grid.code(s.key, s.cls_name, cell)):
            n[bit] = float(c)
    return z, n


def discretize_cells(micp: MicpProgram, x_base) -> dict:
    """Grid cell index of every gridded scalar."""
    x = np.asarray(x_base, dtype=float)
    return {key: cell_of_scalar(micp, s, x) for key, s in micp.scalars.items()}
