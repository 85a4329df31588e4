"""Benchmark harness: per-instance method drivers and batch metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as _model
from .admm import AdmmOptions, solve_admm
from .bnb import solve_bnb
from .envelope import Grid, compile_micp, lift_point, EmptyRestriction
from .learn.cluster import ClusterModel, classify
from .learn.dataset import Dataset, EmptyDataset
from .learn.knn import knn_query
from .learn.strategy import discretize_solution
from .nlp import NlpOptions, solve_mpcc, warm_start_manual
from .program import fix_integers, to_mpcc
from .qp import OPTIMAL, QpSettings, solve_qp

log = logging.getLogger(__name__)

METHODS = ("mpcc-default", "mpcc-manual", "mpcc-knn", "micp-full", "micp-reduced", "convex-strategy", "admm")


class EmptyBatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    n_books: int = 3
    k: int = 3  # KNN candidates for mpcc-knn
    k_strategy: int = 10  # candidates for convex-strategy
    worst: bool = False
    mpcc_eps: float = 1e-3
    oracle_tol: float = 1e-4  # for methods that keep the exact constraints
    convex_max_iter: int = 200
    micp_node_limit: int = 50
    micp_time_limit: float = 60.0
    admm_max_outer: int = 20
    seed_offset: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Resources:
    dataset: Optional[Dataset] = None
    clusters: Optional[ClusterModel] = None
    grid: Grid = field(default_factory=Grid.default)
    config: BenchConfig = field(default_factory=BenchConfig)


@dataclass
class MethodResult:
    method: str
    success: bool
    time: float
    objective: float
    candidates: int
    status: str = ""
    fallback: bool = False
    tol: float = 1e-4
    solution: Optional[_model.BookshelfSolution] = None
    seed: Optional[int] = None


def _verified(instance, prog, x, tol):
    sol = _model.solution_from_point(instance, prog, x)
    return sol, _model.check_solution(instance, sol, tol=tol).passed


def _need_dataset(res: Resources, method):
    if res.dataset is None or len(res.dataset) == 0:
        raise EmptyDataset(f"{method} needs a dataset")


def _knn(res: Resources, instance, k, worst=False):
    ds = res.dataset.subset(len(instance.theta()))
    return knn_query(ds, instance.theta(), k, worst=worst)


# --- drivers ---------------------------------------------------------------------------

def _mpcc(instance, prog, starts, res: Resources):
    cfg = res.config
    mp = to_mpcc(prog, cfg.mpcc_eps)
    used, last_status = 0, "NoCandidate"
    for x0 in starts:
        used += 1
        r = solve_mpcc(prog, x0, cfg.mpcc_eps, mpcc=mp)
        last_status = r.status
        if r.status == "Feasible":
            sol, ok = _verified(instance, prog, r.x, cfg.oracle_tol)
            if ok:
                return True, sol, used, r.status
    return False, None, used, last_status


def _micp_solution(instance, prog, micp, r):
    if r.x is None:
        return None, False
    return _verified(instance, prog, r.x[: prog.n], micp.tolerance)


def _micp_hint(micp, res: Resources, instance):
    """Nearest stored solution lifted into ``micp``.

    The binaries give the incumbent assignment and the continuous part warm
    starts its convex solve (cold starts can be slow on these degenerate QPs).
    """
    if res.dataset is None or len(res.dataset) == 0:
        return None
    rec = _knn(res, instance, 1)[0]
    return lift_point(micp, rec.x)


def _convex_strategy(instance, prog, res: Resources):
    cfg = res.config
    micp = compile_micp(prog, res.grid)
    settings = QpSettings(rho=0.1, polish=True)
    used = 0
    status = "NoCandidate"
    for rec in _knn(res, instance, cfg.k_strategy, worst=cfg.worst):
        used += 1
        z, n = discretize_solution(micp, rec.x)
        cp = fix_integers(micp.program, {**z, **n})
        warm = cp.restrict(lift_point(micp, rec.x))
        r = solve_qp(cp, warm, max_iter=cfg.convex_max_iter, settings=settings)
        status = r.status
        if r.x is None or r.status not in (OPTIMAL, "MaxIterations"):
            continue
        full = cp.embed(r.x)
        sol, ok = _verified(instance, prog, full[: prog.n], micp.tolerance)
        if ok:
            return True, sol, used, r.status, micp.tolerance
    return False, None, used, status, micp.tolerance


def solve_instance(instance: _model.ProblemInstance, method: str, resources: Resources = None,
                   seed: Optional[int] = None) -> MethodResult:
    """Run one method on one instance; failures are reported, not raised."""
    res = resources or Resources()
    cfg = res.config
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if method in ("mpcc-knn", "convex-strategy", "micp-reduced"):
        _need_dataset(res, method)
    if method == "micp-reduced" and res.clusters is None:
        raise ConfigError("micp-reduced needs a cluster model")
    prog = _model.build_minlp(instance)
    t0 = time.perf_counter()
    tol = cfg.oracle_tol
    fallback = False
    sol, ok, used, status = None, False, 1, ""
    if method == "mpcc-default":
        ok, sol, used, status = _mpcc(instance, prog, [None], res)
    elif method == "mpcc-manual":
        ok, sol, used, status = _mpcc(instance, prog, [warm_start_manual(prog, instance)], res)
    elif method == "mpcc-knn":
        recs = _knn(res, instance, cfg.k, worst=cfg.worst)
        ok, sol, used, status = _mpcc(instance, prog, [r.x for r in recs], res)
    elif method == "micp-full":
        micp = compile_micp(prog, res.grid)
        tol = micp.tolerance
        r = solve_bnb(micp, node_limit=cfg.micp_node_limit, time_limit=cfg.micp_time_limit)
        status = r.status
        sol, ok = _micp_solution(instance, prog, micp, r)
    elif method == "micp-reduced":
        label = classify(res.clusters, instance.theta())
        status = "Infeasible"
        try:
            micp = compile_micp(prog, res.clusters.reduced_grid(label))
            tol = micp.tolerance
            r = solve_bnb(micp, node_limit=cfg.micp_node_limit, time_limit=cfg.micp_time_limit,
                          incumbent_hint=_micp_hint(micp, res, instance))
            status = r.status
            sol, ok = _micp_solution(instance, prog, micp, r)
        except EmptyRestriction:
            ok = False
        # node limits cannot prove infeasibility, so ending without an incumbent counts as infeasible
        if not ok and status in ("Infeasible", "TimeLimit"):
            fallback = True
            micp = compile_micp(prog, res.grid)
            tol = micp.tolerance
            r = solve_bnb(micp, node_limit=cfg.micp_node_limit, time_limit=cfg.micp_time_limit,
                          incumbent_hint=_micp_hint(micp, res, instance))
            status = r.status
            sol, ok = _micp_solution(instance, prog, micp, r)
    elif method == "convex-strategy":
        ok, sol, used, status, tol = _convex_strategy(instance, prog, res)
    elif method == "admm":
        ar = solve_admm(instance, AdmmOptions(max_outer=cfg.admm_max_outer), program=prog)
        micp_tol = _envelope_tolerance(prog, res.grid)
        tol = micp_tol
        sol = ar.solution
        ok = _model.check_solution(instance, sol, tol=tol).passed
        used = ar.iterations
        status = ar.status
    elapsed = time.perf_counter() - t0
    obj = sol.objective if (ok and sol is not None) else math.nan
    return MethodResult(method, bool(ok), elapsed, obj, used, status, fallback, tol, sol if ok else None, seed)


_TOL_CACHE: dict = {}


def _envelope_tolerance(prog, grid: Grid) -> float:
    """Worst-case envelope gap for this book count and grid (cached)."""
    key = (prog.meta["layout"].n_books, grid.to_json())
    if key not in _TOL_CACHE:
        _TOL_CACHE[key] = compile_micp(prog, grid).tolerance
    return _TOL_CACHE[key]


# --- batches ---------------------------------------------------------------------------

@dataclass
class MethodSummary:
    method: str
    n: int
    successes: int
    fallbacks: int
    avg_time: float
    max_time: float
    avg_objective: float
    avg_candidates: float

    @property
    def success_rate(self) -> float:
        return self.successes / self.n if self.n else 0.0


@dataclass
class BenchTable:
    summaries: list
    results: list  # MethodResult per (method, seed)

    def summary(self, method: str) -> MethodSummary:
        return next(s for s in self.summaries if s.method == method)

    def to_csv(self) -> str:
        """Deterministic metrics (no timings)."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["method", "instances", "success_rate", "fallbacks", "avg_objective", "avg_candidates"])
        for s in self.summaries:
            wr.writerow([s.method, s.n, f"{s.success_rate:.4f}", s.fallbacks,
                         "-" if math.isnan(s.avg_objective) else f"{s.avg_objective:.6f}",
                         f"{s.avg_candidates:.4f}"])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["method", "avg_time_s", "max_time_s"])
        for s in self.summaries:
            wr.writerow([s.method, f"{s.avg_time:.4f}", f"{s.max_time:.4f}"])
        return buf.getvalue()


def summarize(method: str, results: Sequence[MethodResult], instances: dict) -> MethodSummary:
    ok = []
    for r in results:
        # re-verify every reported success against the oracle
        good = r.success and r.solution is not None and \
            _model.check_solution(instances[r.seed], r.solution, tol=r.tol).passed
        ok.append(good)
    times = [r.time for r in results]
    objs = [r.objective for r, g in zip(results, ok) if g]
    return MethodSummary(method, len(results), int(sum(ok)), sum(r.fallback for r in results),
                         float(np.mean(times)) if times else 0.0, float(max(times, default=0.0)),
                         float(np.mean(objs)) if objs else math.nan,
                         float(np.mean([r.candidates for r in results])) if results else 0.0)


def run_benchmark(methods: Sequence[str], seeds: Sequence[int], config: BenchConfig = None,
                  resources: Resources = None, progress=None) -> BenchTable:
    if not methods or not seeds:
        raise EmptyBatch("need at least one method and one seed")
    res = resources or Resources(config=config or BenchConfig())
    if config is not None:
        res.config = config
    cfg = res.config
    instances = {s: _model.generate_instance(s + cfg.seed_offset, n_books=cfg.n_books) for s in seeds}
    summaries, results = [], []
    for m in methods:
        rs = []
        for s in seeds:
            r = solve_instance(instances[s], m, res, seed=s)
            rs.append(r)
            if progress:
                progress(m, s, r)
        results += rs
        summaries.append(summarize(m, rs, instances))
    return BenchTable(summaries, results)


def write_svg(table: BenchTable, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "shelfmip"
    names = [s.method for s in table.summaries]
    rates = [100 * s.success_rate for s in table.summaries]
    cands = [s.avg_candidates for s in table.summaries]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.5))
    a1.bar(names, rates, color="tab:blue")
    a1.set_ylabel("success (%)")
    a1.set_ylim(0, 100)
    a2.bar(names, cands, color="tab:orange")
    a2.set_ylabel("avg candidates / iterations")
    for ax in (a1, a2):
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
