import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shelfmip.program import (BINARY, EQ, LE, Builder, Constraint, ProgramError, Quadratic,
                              ResidualNonconvexity, UnboundedBigM, evaluate, fix_integers, guard_bigM, load,
                              dump, to_mpcc)


def small_program():
    b = Builder()
    x = b.var("x", lo=-5, hi=5)
    y = b.var("y", lo=-2, hi=3)
    z = b.var("z", BINARY, 0, 1)
    b.add("lin", [(x, 1), (y, 1)], rhs=4.0, family="A")
    b.add("bil", [(x, 1)], [(x, y, 1.0)], LE, 2.0, family="C")
    b.add("g", [(x, 1)], rhs=0.0, family="H", guard=[(z, True)])
    return b.build(Quadratic(((x, x, 1.0),), ((y, -1.0),), 0.5))


def test_guard_bigM_interval_sup():
    con = Constraint("c", ((0, 1.0),), (), LE, 0.0)
    g = guard_bigM(con, 1, [-5.0, 0.0], [5.0, 1.0])
    assert g.big_m == (5.0, 0.0)
    assert g.guard == ((1, True),)


def test_guard_bigM_unbounded():
    con = Constraint("c", ((0, 1.0),), (), LE, 0.0)
    with pytest.raises(UnboundedBigM):
        guard_bigM(con, 1, [-math.inf, 0.0], [5.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.booleans())
def test_bigM_soundness(x, y, rhs, eq):
    con = Constraint("c", ((0, 1.0), (1, -2.0)), ((0, 1, 0.5),), EQ if eq else LE, rhs)
    g = guard_bigM(con, 2, [-5, -5, 0], [5, 5, 1])
    p = Builder()
    for name in "xy":
        p.var(name, lo=-5, hi=5)
    p.var("z", BINARY, 0, 1)
    prog0 = p.build().with_changes(constraints=(g,))
    plain = p.build().with_changes(constraints=(con,))
    _, v_off = evaluate(prog0, [x, y, 0.0])
    assert v_off[0] == 0.0
    _, v_on = evaluate(prog0, [x, y, 1.0])
    _, v_plain = evaluate(plain, [x, y, 1.0])
    assert v_on[0] == pytest.approx(v_plain[0], abs=1e-12)


def test_equality_guard_two_sided():
    b = Builder()
    x = b.var("x", lo=-1, hi=4)
    z = b.var("z", BINARY, 0, 1)
    b.add("e", [(x, 1)], sense=EQ, rhs=1.0, guard=[(z, True)])
    prog = b.build()
    assert prog.constraints[0].big_m == (3.0, 2.0)
    assert len(prog.lowered.is_eq) == 2 and not prog.lowered.is_eq.any()


def test_undeclared_variable_rejected():
    b = Builder()
    b.var("x")
    b.constraints.append(Constraint("bad", ((3, 1.0),)))
    with pytest.raises(ProgramError):
        b.build()


def test_kinds_and_families():
    prog = small_program()
    kinds = {c.name: c.kind for c in prog.constraints}
    assert kinds == {"lin": "linear", "bil": "bilinear", "g": "linear"}
    assert [c.name for c in prog.bilinear_constraints()] == ["bil"]


def test_evaluate_against_direct_formula(rng):
    prog = small_program()
    for _ in range(50):
        p = rng.uniform([-5, -2, 0], [5, 3, 1])
        obj, viol = evaluate(prog, p)
        x, y, z = p
        assert obj == pytest.approx(x * x - y + 0.5, abs=1e-12)
        assert viol[0] == pytest.approx(max(0.0, x + y - 4), abs=1e-12)
        assert viol[1] == pytest.approx(max(0.0, x + x * y - 2), abs=1e-12)
        assert viol[2] == pytest.approx(max(0.0, x - 5.0 * (1 - z)), abs=1e-12)


def test_lowered_matches_evaluate(rng):
    prog = small_program()
    low = prog.lowered
    for _ in range(20):
        p = rng.uniform([-5, -2, 0], [5, 3, 1])
        _, viol = evaluate(prog, p)
        lv = low.violation(p)
        for k in range(len(prog.constraints)):
            assert viol[k] == pytest.approx(lv[low.owner == k].max(), abs=1e-12)


def test_mpcc_integrality_violation():
    b = Builder()
    b.var("z", BINARY, 0, 1)
    mp = to_mpcc(b.build(), 0.0)
    _, viol = evaluate(mp, [0.5])
    assert viol[-1] == pytest.approx(0.25)


def test_mpcc_eps_window():
    b = Builder()
    b.var("z", BINARY, 0, 1)
    mp = to_mpcc(b.build(), 1e-3)
    root = (1 - math.sqrt(1 - 4e-3)) / 2
    for z, ok in ((0.0, True), (root * 0.99, True), (root * 1.1, False), (0.5, False), (1 - root * 0.99, True)):
        _, viol = evaluate(mp, [z])
        assert (viol.max() <= 1e-12) == ok


def test_mpcc_preserves_bilinear_count():
    prog = small_program()
    mp = to_mpcc(prog, 1e-3)
    orig = [c for c in mp.constraints if c.family != "COMP" and c.kind == "bilinear"]
    assert len(orig) == len(prog.bilinear_constraints())


def test_mpcc_equivalence_at_zero(rng):
    prog = small_program()
    mp = to_mpcc(prog, 0.0)
    for _ in range(200):
        x, y = rng.uniform(-5, 5), rng.uniform(-2, 3)
        for z in (0.0, 1.0):
            assert evaluate(prog, [x, y, z])[1].max() == pytest.approx(evaluate(mp, [x, y, z])[1].max())
        frac = rng.uniform(0.01, 0.99)
        assert evaluate(mp, [x, y, frac])[1].max() > 0


def test_fix_integers_rejects_bilinear():
    with pytest.raises(ResidualNonconvexity):
        fix_integers(small_program(), {2: 1})


def test_fix_integers_resolves_guards():
    b = Builder()
    x = b.var("x", lo=-5, hi=5)
    z = b.var("z", BINARY, 0, 1)
    b.add("g", [(x, 1)], rhs=0.0, guard=[(z, True)])
    prog = b.build()
    on = fix_integers(prog, {z: 1})
    off = fix_integers(prog, {z: 0})
    assert len(on.program.constraints) == 1 and len(off.program.constraints) == 0
    assert list(on.free) == [0]
    np.testing.assert_allclose(on.embed([2.0]), [2.0, 1.0])


def test_fix_integers_missing_binary():
    b = Builder()
    b.var("z", BINARY, 0, 1)
    b.var("w", BINARY, 0, 1)
    with pytest.raises(ProgramError):
        fix_integers(b.build(), {0: 1})


def test_dump_load_roundtrip():
    prog = small_program()
    text = prog.to_json()
    back = load(json.loads(text))
    assert back.variables == prog.variables
    assert back.constraints == prog.constraints
    assert back.objective == prog.objective
    assert dump(back) == dump(prog)
