"""Compare the compiled kernels with the numpy fallback.

Run ``python benchmarks/bench_kernels.py``.  Rows come from a real
4-book program (with complementarity rows), the overlap kernel is timed on
a batch of random rectangle pairs.
"""
import argparse
import timeit

import numpy as np

from shelfmip import _kernels_py, model
from shelfmip.program import to_mpcc

try:
    from shelfmip import _kernels as compiled
except ImportError:
    compiled = None


def _rows_args(program):
    r = program.lowered.rows
    return (r.indptr, r.idx, r.val, r.bil_row, r.bil_i, r.bil_j, r.bil_val, r.rhs, r.n)


def _rects(rng, n):
    out = np.empty((n, 4, 2))
    for k in range(n):
        b = model.BookSpec(*rng.uniform(1, 5, 2))
        p = model.Pose(*rng.uniform(-3, 3, 2), rng.uniform(-1.5, 1.5))
        out[k] = model.vertices(b, p)
    return out


def bench(name, fn, number):
    t = min(timeit.repeat(fn, number=number, repeat=5)) / number
    return name, t


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=20000)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)

    inst, _ = model.generate_scene(0, n_books=4)
    prog = to_mpcc(model.build_minlp(inst), 1e-3)
    low = prog.lowered
    rng = np.random.default_rng(0)
    x = rng.normal(size=prog.n)
    lam = rng.normal(size=low.m)
    is_eq = low.is_eq.astype(np.uint8)
    P = low.P.tocsr()
    p_parts = (P.indptr.astype(np.int64), P.indices.astype(np.int64), P.data.astype(np.float64))
    A, B = _rects(rng, args.pairs), _rects(rng, args.pairs)

    backends = [("python", _kernels_py)] + ([("cython", compiled)] if compiled is not None else [])
    results = {}
    for label, mod in backends:
        rows = mod.PolyRows(*_rows_args(prog))
        results[label] = [
            bench("rows.values", lambda: rows.values(x), args.number),
            bench("rows.jac_t", lambda: rows.jac_t(x, lam), args.number),
            bench("al_value_grad", lambda: rows.al_value_grad(x, lam, 10.0, is_eq, *p_parts, low.q, 0.0),
                  args.number),
            bench(f"rect_penetration[{args.pairs}]", lambda: mod.rect_penetration(A, B), 3),
        ]
    print(f"program: {prog.n} variables, {low.m} rows, {len(low.rows.bil_row)} bilinear terms")
    print(f"{'kernel':28s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for k, (name, tp) in enumerate(results["python"]):
        if "cython" in results:
            tc = results["cython"][k][1]
            print(f"{name:28s} {tp * 1e6:12.1f} {tc * 1e6:12.1f} {tp / tc:8.1f}")
        else:
            print(f"{name:28s} {tp * 1e6:12.1f} {'n/a':>12s} {'n/a':>8s}")


if __name__ == "__main__":
    main()
