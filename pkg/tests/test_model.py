import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shelfmip import model
from shelfmip.model import (BookSpec, BookshelfSolution, GenerationFailed, Mode, ModelError, Pose,
                            ProblemInstance, ShelfSpec, StoredBook)
from shelfmip.program import evaluate


def test_generated_four_book_scene_passes_oracle():
    inst, ref = model.generate_scene(0, ShelfSpec(18, 11), n_books=4)
    assert inst.n_books == 4
    assert model.check_solution(inst, ref).passed


def test_generation_fails_on_tiny_shelf():
    with pytest.raises(GenerationFailed):
        model.generate_instance(0, ShelfSpec(1, 1), n_books=3, width_range=(4, 8), height_range=(4, 8),
                                max_tries=20)


@pytest.mark.parametrize("n_books", [2, 3, 4])
def test_generator_feasibility(n_books):
    for seed in range(15):
        inst, ref = model.generate_scene(seed, n_books=n_books)
        assert model.check_solution(inst, ref, tol=1e-7).passed
        prog = model.build_minlp(inst)
        x = model.point_from_solution(prog, ref)
        _, viol = evaluate(prog, x)
        assert viol.max() <= 1e-7
        assert np.all(x >= prog.lo - 1e-12) and np.all(x <= prog.hi + 1e-12)


def test_bilinear_families_four_books(scene4):
    prog = model.build_minlp(scene4[0])
    fams = {c.family for c in prog.bilinear_constraints()}
    assert fams == {"C", "E", "F", "K1", "L1"}


def test_nonconvex_dimension_four_books(scene4):
    prog = model.build_minlp(scene4[0])
    layout = model.layout_of(prog)
    dims = sum(2 if kind == "vx" else 1 for kind, _, _ in layout.nonconvex_indices() if kind != "vy")
    dims += sum(1 for kind, _, _ in layout.nonconvex_indices() if kind == "vy")
    # 4 angles + 6 planes x 2 normal components + 16 vertices x 2
    assert sum(1 for k, _, _ in layout.nonconvex_indices() if k == "theta") == 4
    assert sum(1 for k, _, _ in layout.nonconvex_indices() if k == "a") == 12
    assert sum(1 for k, _, _ in layout.nonconvex_indices() if k in ("vx", "vy")) == 32
    assert len(layout.nonconvex_indices()) == 48


def test_single_stored_book_has_one_plane():
    inst = ProblemInstance(ShelfSpec(), (StoredBook(BookSpec(2, 6), Pose(0, 3, 0)),), BookSpec(2, 7))
    prog = model.build_minlp(inst)
    L = model.layout_of(prog)
    assert L.pairs == [(0, 1)]
    assert len(L.ax) == len(L.ay) == len(L.b) == 1


def test_theta_dimension(scene4):
    assert scene4[0].theta().shape == (17,)


def test_instance_json_roundtrip(scene4):
    inst = scene4[0]
    back = ProblemInstance.from_json(inst.to_json())
    np.testing.assert_allclose(back.theta(), inst.theta())
    assert [s.mode for s in back.stored] == [s.mode for s in inst.stored]


def test_instance_json_rejects_unknown_fields(scene4):
    d = scene4[0].to_dict()
    d["colour"] = "red"
    with pytest.raises(ModelError):
        ProblemInstance.from_dict(d)
    d = scene4[0].to_dict()
    d["stored"][0]["mass"] = 1.0
    with pytest.raises(ModelError):
        ProblemInstance.from_dict(d)


def test_json_field_order_irrelevant(scene4):
    d = scene4[0].to_dict()
    shuffled = {k: d[k] for k in reversed(list(d))}
    shuffled["stored"] = [{k: s[k] for k in reversed(list(s))} for s in d["stored"]]
    back = ProblemInstance.from_dict(json.loads(json.dumps(shuffled)))
    np.testing.assert_allclose(back.theta(), scene4[0].theta())


def test_stored_books_must_be_ordered():
    with pytest.raises(ModelError):
        ProblemInstance(ShelfSpec(), (StoredBook(BookSpec(2, 6), Pose(3, 3, 0)),
                                      StoredBook(BookSpec(2, 6), Pose(0, 3, 0))), BookSpec(2, 6))


def test_vertex_kinematics(rng):
    for _ in range(50):
        b = BookSpec(*rng.uniform(1, 5, 2))
        p = Pose(*rng.uniform(-3, 3, 2), rng.uniform(-math.pi / 2, math.pi / 2))
        v = model.vertices(b, p)
        R = np.array([[math.cos(p.theta), -math.sin(p.theta)], [math.sin(p.theta), math.cos(p.theta)]])
        h = np.array([[b.w / 2, b.h / 2], [b.w / 2, -b.h / 2], [-b.w / 2, -b.h / 2], [-b.w / 2, b.h / 2]])
        np.testing.assert_allclose(v, np.array([p.x, p.y]) + h @ R.T, atol=1e-14)


def _two_book_instance():
    return ProblemInstance(ShelfSpec(), (StoredBook(BookSpec(2, 6), Pose(0, 3, 0)),), BookSpec(2, 6))


def test_identical_poses_overlap():
    inst = _two_book_instance()
    sol = BookshelfSolution((Pose(0, 3, 0), Pose(0, 3, 0)), (Mode.UPRIGHT, Mode.UPRIGHT), (None, None))
    rep = model.check_solution(inst, sol)
    assert not rep.passed and "overlap" in rep.failing()


def test_shared_edge_is_not_overlap():
    inst = _two_book_instance()
    sol = BookshelfSolution((Pose(0, 3, 0), Pose(2, 3, 0)), (Mode.UPRIGHT, Mode.UPRIGHT), (None, None))
    rep = model.check_solution(inst, sol, tol=0.0)
    assert rep.violations["overlap"] == 0.0
    assert rep.passed


def test_objective_examples(scene4):
    inst, ref = scene4
    base = BookshelfSolution(tuple(s.pose for s in inst.stored) + (ref.poses[-1],), ref.modes, ref.supports)
    assert model.objective_value(inst, base) == 0.0
    moved = list(base.poses)
    p = moved[0]
    moved[0] = Pose(p.x + 1.0, p.y, p.theta)
    sol = BookshelfSolution(tuple(moved), base.modes, base.supports)
    assert model.objective_value(inst, sol, w_theta=1.0) == pytest.approx(1.0)


def test_objective_matches_direct_formula(scene4, rng):
    inst, ref = scene4
    for _ in range(20):
        poses = tuple(Pose(p.x + rng.normal(), p.y + rng.normal(), p.theta + 0.1 * rng.normal()) for p in ref.poses)
        sol = BookshelfSolution(poses, ref.modes, ref.supports)
        direct = sum((p.x - s.pose.x) ** 2 + (p.y - s.pose.y) ** 2 + 10 * (p.theta - s.pose.theta) ** 2
                     for p, s in zip(poses, inst.stored))
        assert model.objective_value(inst, sol) == pytest.approx(direct, rel=1e-12)


def test_max_margin_plane_disjoint():
    va = model.vertices(BookSpec(2, 6), Pose(0, 3, 0))
    vb = model.vertices(BookSpec(2, 6), Pose(3, 3, 0.2))
    (ax, ay), b, margin = model.max_margin_plane(va, vb)
    a = np.array([ax, ay])
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)
    assert margin > 0
    assert np.all(va @ a <= b + 1e-9) and np.all(vb @ a >= b - 1e-9)


def test_max_margin_plane_touching():
    va = model.vertices(BookSpec(2, 6), Pose(0, 3, 0))
    vb = model.vertices(BookSpec(2, 6), Pose(2, 3, 0))
    (ax, ay), b, margin = model.max_margin_plane(va, vb)
    assert margin == pytest.approx(0.0, abs=1e-12)
    assert (ax, ay) == pytest.approx((1.0, 0.0))
    assert b == pytest.approx(1.0)


@settings(max_examples=150, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_plane_soundness(dx, dy, t1, t2):
    va = model.vertices(BookSpec(2, 3), Pose(0, 0, t1))
    vb = model.vertices(BookSpec(1.5, 4), Pose(dx, dy, t2))
    pen = float(model.kernels.rect_penetration(va[None], vb[None])[0])
    _, _, margin = model.max_margin_plane(va, vb)
    _, _, margin_rev = model.max_margin_plane(vb, va)
    best = max(margin, margin_rev)
    if pen < -1e-9:
        assert best > 0
    if pen > 1e-9:
        assert best < 0


def test_solution_roundtrip(scene4):
    inst, ref = scene4
    back = BookshelfSolution.from_dict(json.loads(json.dumps(ref.to_dict())))
    assert back.modes == ref.modes and back.slot == ref.slot
    prog = model.build_minlp(inst)
    x = model.point_from_solution(prog, ref)
    sol = model.solution_from_point(inst, prog, x)
    assert sol.modes == ref.modes
    for a, b in zip(sol.poses, ref.poses):
        assert (a.x, a.y, a.theta) == pytest.approx((b.x, b.y, b.theta), abs=1e-9)


def test_mode_exclusivity_rows(scene4):
    prog = model.build_minlp(scene4[0])
    g = [c for c in prog.constraints if c.family == "G"]
    assert len(g) == 4
    for c in g:
        assert c.sense == "==" and c.rhs == 1.0 and len(c.linear) == len(Mode)


def test_lean_needs_support():
    with pytest.raises(ModelError):
        ProblemInstance(ShelfSpec(), (StoredBook(BookSpec(2, 6), Pose(0, 3, 0.3), Mode.LEAN_LEFT, None),),
                        BookSpec(2, 6))
