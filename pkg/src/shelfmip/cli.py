"""Command line entry point (``shelfmip``)."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_CONFIG = 2


def _seeds(text: str) -> list:
    """``"0-199"`` or ``"1,5,9"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _config(path):
    from .bench import BenchConfig
    if path is None:
        return BenchConfig()
    return BenchConfig.from_dict(json.loads(Path(path).read_text()))


def _resources(args, cfg):
    from .bench import Resources
    from .learn import Dataset
    res = Resources(config=cfg)
    if getattr(args, "dataset", None):
        res.dataset = Dataset.load(args.dataset)
    if getattr(args, "clusters", None):
        import pickle
        with open(args.clusters, "rb") as fh:
            res.clusters = pickle.load(fh)
    return res


def cmd_gen(args):
    from .model import generate_instance, ShelfSpec
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in _seeds(args.seeds):
        inst = generate_instance(s, ShelfSpec(args.width, args.height), n_books=args.n_books)
        (out / f"instance_{s:05d}.json").write_text(inst.to_json())
    return 0


def cmd_solve(args):
    from .bench import solve_instance
    from .model import ProblemInstance
    cfg = _config(args.config)
    inst = ProblemInstance.from_json(Path(args.instance).read_text())
    r = solve_instance(inst, args.method, _resources(args, cfg))
    report = {"method": r.method, "success": r.success, "status": r.status, "objective": r.objective,
              "candidates": r.candidates, "time": r.time, "fallback": r.fallback}
    if r.solution is not None and args.out:
        Path(args.out).write_text(json.dumps({"instance": inst.to_dict(), "solution": r.solution.to_dict(),
                                              "tol": r.tol}, indent=1))
    print(json.dumps(report))
    return 0


def cmd_bootstrap(args):
    from .learn import BootstrapConfig, bootstrap_dataset, Dataset
    cfg = BootstrapConfig(args.rounds, args.per_round, args.base, args.n_books, args.seed0)
    ds = Dataset.load(args.out) if Path(args.out).exists() and args.resume else None
    rep = bootstrap_dataset(cfg, ds)
    rep.dataset.save(args.out)
    for st in rep.rounds:
        print(f"round {st.round} {st.method}: {st.solved}/{st.attempted} solved, {st.added} added, "
              f"{st.replaced} replaced")
    return 0


def cmd_cluster(args):
    import pickle
    from .envelope import Grid
    from .learn import Dataset, fit_clusters
    from .model import ProblemInstance, build_minlp
    ds = Dataset.load(args.dataset)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    template = build_minlp(ProblemInstance.from_dict(ds.records[0].instance))
    ds = ds.subset(ds.records[0].theta.size)
    model = fit_clusters(ds, Grid.default(), template, eps=args.eps, min_pts=args.min_pts, seed=args.seed)
    with open(args.out, "wb") as fh:
        pickle.dump(model, fh)
    sizes = [int((model.labels == c).sum()) for c in range(model.n_clusters)]
    print(f"{model.n_clusters} clusters (eps={model.eps:.4g}), sizes {sizes}, "
          f"noise {int((model.labels < 0).sum())}")
    return 0


def cmd_bench(args):
    from .bench import run_benchmark, write_svg
    cfg = _config(args.config)
    res = _resources(args, cfg)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    table = run_benchmark(methods, _seeds(args.seeds), cfg, res)
    text = table.to_csv()
    if args.out_csv:
        Path(args.out_csv).write_text(text)
        Path(args.out_csv).with_suffix(".timing.csv").write_text(table.timing_csv())
    else:
        sys.stdout.write(text)
    if args.out_svg:
        write_svg(table, args.out_svg)
    return 0


def cmd_verify(args):
    from .model import BookshelfSolution, ProblemInstance, check_solution
    data = json.loads(Path(args.solution).read_text())
    inst = ProblemInstance.from_dict(data["instance"])
    sol = BookshelfSolution.from_dict(data["solution"])
    tol = args.tol if args.tol is not None else float(data.get("tol", 1e-4))
    rep = check_solution(inst, sol, tol=tol)
    for k, v in rep.violations.items():
        print(f"{k:12s} {v:.3e} {'ok' if v <= tol else 'FAIL'}")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shelfmip")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate instances")
    g.add_argument("--seeds", default="0-9")
    g.add_argument("--n-books", type=int, default=3)
    g.add_argument("--width", type=float, default=18.0)
    g.add_argument("--height", type=float, default=11.0)
    g.add_argument("--out", default="instances")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve one instance")
    s.add_argument("--method", required=True)
    s.add_argument("--instance", required=True)
    s.add_argument("--dataset")
    s.add_argument("--clusters")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bootstrap", help="grow a dataset")
    b.add_argument("--rounds", type=int, default=3)
    b.add_argument("--per-round", type=int, default=100)
    b.add_argument("--base", default="manual")
    b.add_argument("--n-books", type=int, default=3)
    b.add_argument("--seed0", type=int, default=100000)
    b.add_argument("--resume", action="store_true")
    b.add_argument("--out", default="dataset.jsonl")
    b.set_defaults(func=cmd_bootstrap)

    c = sub.add_parser("cluster", help="cluster a dataset and train the classifier")
    c.add_argument("--dataset", required=True)
    c.add_argument("--eps", type=float)
    c.add_argument("--min-pts", type=int, default=4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="clusters.pkl")
    c.set_defaults(func=cmd_cluster)

    r = sub.add_parser("bench", help="run a benchmark batch")
    r.add_argument("--methods", default="mpcc-default,mpcc-manual")
    r.add_argument("--seeds", default="0-19")
    r.add_argument("--dataset")
    r.add_argument("--clusters")
    r.add_argument("--config")
    r.add_argument("--out-csv")
    r.add_argument("--out-svg")
    r.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="check a stored solution with the geometric oracle")
    v.add_argument("--solution", required=True)
    v.add_argument("--tol", type=float)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SHELFMIP_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    from .bench import ConfigError
    from .learn import AllNoise, DatasetError
    try:
        return args.func(args)
    except (ConfigError, DatasetError, AllNoise, ValueError, KeyError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
