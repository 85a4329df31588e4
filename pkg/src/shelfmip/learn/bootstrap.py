"""Iterative dataset growth: a non-data-driven base round, then KNN rounds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .. import model as _model
from .dataset import Dataset, DatasetRecord

log = logging.getLogger(__name__)

BASES = ("manual", "admm")


@dataclass
class BootstrapConfig:
    rounds: int = 3
    per_round: int = 100
    base: str = "manual"
    n_books: int = 3
    seed0: int = 100000
    k: int = 3
    resolve: int = 0  # stored records re-solved per KNN round

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}")
        if self.rounds < 1 or self.per_round < 1:
            raise ValueError("rounds and per_round must be positive")


@dataclass
class RoundStats:
    round: int
    method: str
    attempted: int
    solved: int
    added: int
    replaced: int

    @property
    def success_rate(self) -> float:
        return self.solved / self.attempted if self.attempted else 0.0


@dataclass
class BootstrapReport:
    dataset: Dataset
    rounds: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (round, seed)


def _record(instance, prog, result, method):
    x = _model.point_from_solution(prog, result.solution, instance)
    return DatasetRecord(instance.theta(), x, float(result.objective), method, float(result.time),
                         instance.to_dict())


def bootstrap_dataset(config: BootstrapConfig, dataset: Optional[Dataset] = None, resources=None,
                      store_path=None) -> BootstrapReport:
    """Grow ``dataset`` round by round.

    Round 0 uses the base method; later rounds warm-start from the data
    gathered so far.  Only oracle-verified solutions are stored; a record
    for an already stored theta is replaced only by a strictly cheaper one.
    With ``store_path`` each round's new records are appended to disk.
    """
    from ..bench import Resources, solve_instance

    ds = dataset if dataset is not None else Dataset(meta={"n_books": config.n_books})
    res = resources or Resources()
    res.dataset = ds
    res.config.k = config.k
    report = BootstrapReport(ds)
    seed = config.seed0
    for rnd in range(config.rounds):
        method = ("mpcc-manual" if config.base == "manual" else "admm") if rnd == 0 else "mpcc-knn"
        tag = method
        todo = []
        for _ in range(config.per_round):
            todo.append(_model.generate_instance(seed, n_books=config.n_books))
            seed += 1
        if rnd > 0 and config.resolve:
            for rec in ds.records[: config.resolve]:
                if rec.instance is not None:
                    todo.append(_model.ProblemInstance.from_dict(rec.instance))
        stats = RoundStats(rnd, method, 0, 0, 0, 0)
        fresh = []
        for inst in todo:
            stats.attempted += 1
            r = solve_instance(inst, method, res, seed=None)
            if not r.success:
                report.failures.append((rnd, inst.theta().tolist()))
                continue
            stats.solved += 1
            prog = _model.build_minlp(inst)
            rec = _record(inst, prog, r, tag)
            what = ds.offer(rec)
            if what == "added":
                stats.added += 1
                fresh.append(rec)
            elif what == "replaced":
                stats.replaced += 1
                fresh.append(rec)
        if store_path is not None:
            ds.append_to(store_path, fresh)
        log.info("bootstrap round %d (%s): %d/%d solved", rnd, method, stats.solved, stats.attempted)
        report.rounds.append(stats)
    return report
