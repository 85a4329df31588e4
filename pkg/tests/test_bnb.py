import io
import math

import numpy as np
import pytest

from shelfmip import envelope as E
from shelfmip import model
from shelfmip.bnb import FEASIBLE, INFEASIBLE, OPTIMAL, TIME_LIMIT, solve_bnb
from shelfmip.program import BINARY, CONTINUOUS, Builder, Quadratic

from oracles import enumerate_micp, random_micp


@pytest.mark.parametrize("seed", range(8))
def test_bnb_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    prog, data = random_micp(rng, int(rng.integers(1, 7)))
    ref = enumerate_micp(data)
    res = solve_bnb(prog, gap_tol=1e-9)
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(ref, abs=1e-6 * max(1.0, abs(ref)))
    z = res.x[prog.binaries]
    np.testing.assert_array_equal(z, np.round(z))


def _knapsack_infeasible():
    b = Builder()
    z = [b.var(f"z[{k}]", BINARY, 0, 1) for k in range(3)]
    b.add("odd", [(v, 2.0) for v in z], sense="==", rhs=3.0)
    return b.build(Quadratic(linear=tuple((v, 1.0) for v in z)))


def test_infeasible_mip():
    res = solve_bnb(_knapsack_infeasible())
    assert res.status == INFEASIBLE and res.x is None and math.isinf(res.objective)


def test_fixed_binaries_respected():
    rng = np.random.default_rng(11)
    prog, _ = random_micp(rng, 4)
    free = solve_bnb(prog)
    bins = [int(b) for b in prog.binaries]
    flip = {bins[0]: 1.0 - free.x[bins[0]]}
    res = solve_bnb(prog, fixed=flip)
    if res.status == OPTIMAL:
        assert res.x[bins[0]] == flip[bins[0]]
        assert res.objective >= free.objective - 1e-7


def test_hint_is_used_and_bad_hint_warns():
    rng = np.random.default_rng(2)
    prog, data = random_micp(rng, 5)
    best = solve_bnb(prog)
    hint = {int(b): float(v) for b, v in zip(prog.binaries, best.x[prog.binaries])}
    res = solve_bnb(prog, incumbent_hint=hint)
    assert res.hint_used and res.objective == pytest.approx(best.objective, abs=1e-7)
    res = solve_bnb(prog, incumbent_hint={int(prog.binaries[0]): 1.0})
    assert any("InvalidHint" in w for w in res.warnings)
    assert res.status == OPTIMAL


def test_node_limit_returns_incumbent_or_limit():
    rng = np.random.default_rng(4)
    prog, _ = random_micp(rng, 9)
    res = solve_bnb(prog, node_limit=1)
    assert res.status in (FEASIBLE, TIME_LIMIT, OPTIMAL)
    if res.status == FEASIBLE:
        assert res.bound <= res.objective + 1e-9


def test_gap_history_non_increasing_and_log():
    rng = np.random.default_rng(6)
    prog, _ = random_micp(rng, 8)
    buf = io.StringIO()
    res = solve_bnb(prog, node_log=buf)
    h = res.gap_history
    assert all(b <= a + 1e-15 for a, b in zip(h, h[1:]))
    lines = buf.getvalue().strip().splitlines()
    assert len(lines) == res.nodes + 1


def test_rejects_bilinear_program(scene3):
    with pytest.raises(ValueError):
        solve_bnb(model.build_minlp(scene3[0]))


def test_hinted_shelf_micp_recovers_reference():
    inst, ref = model.generate_scene(1, n_books=3)
    prog = model.build_minlp(inst)
    m = E.compile_micp(prog, E.Grid.default())
    x = model.point_from_solution(prog, ref)
    res = solve_bnb(m, incumbent_hint=E.assignment_for_point(m, x), node_limit=5)
    assert res.hint_used and res.x is not None
    assert res.objective <= ref.objective + 1e-6
    sol = model.solution_from_point(inst, prog, res.x[: prog.n])
    assert model.check_solution(inst, sol, tol=m.tolerance).passed
