"""JSON-lines dataset of solved instances.

The first line is a header ``{"format": ..., "version": ...}``; each further
line is one record.  Appends are serialized through a lock so readers can
share a store with one writer.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FORMAT = "shelfmip-dataset"
VERSION = 1


class DatasetError(ValueError):
    pass


class EmptyDataset(DatasetError):
    pass


@dataclass
class DatasetRecord:
    theta: np.ndarray
    x: np.ndarray  # base-program point (continuous values and mode/slot binaries)
    objective: float
    method: str
    solve_time: float = 0.0
    instance: Optional[dict] = None
    grid_bits: Optional[dict] = None  # variable name -> 0/1
    cluster: Optional[int] = None
    id: int = -1

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise DatasetError("theta must be finite")

    def to_dict(self) -> dict:
        out = {"id": self.id, "theta": self.theta.tolist(), "x": self.x.tolist(),
               "objective": self.objective, "method": self.method, "solve_time": self.solve_time}
        if self.instance is not None:
            out["instance"] = self.instance
        if self.grid_bits is not None:
            out["grid_bits"] = self.grid_bits
        if self.cluster is not None:
            out["cluster"] = self.cluster
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(d["theta"], d["x"], float(d["objective"]), d["method"], float(d.get("solve_time", 0.0)),
                   d.get("instance"), d.get("grid_bits"), d.get("cluster"), int(d.get("id", -1)))


@dataclass
class Dataset:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._next = max((r.id for r in self.records), default=-1) + 1

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def add(self, record: DatasetRecord) -> DatasetRecord:
        with self._lock:
            record.id = self._next
            self._next += 1
            self.records.append(record)
        return record

    def find(self, theta) -> Optional[DatasetRecord]:
        theta = np.asarray(theta, dtype=float)
        for r in self.records:
            if r.theta.shape == theta.shape and np.array_equal(r.theta, theta):
                return r
        return None

    def offer(self, record: DatasetRecord) -> str:
        """Add a record, or replace the one with the same theta if strictly cheaper.

        Returns ``"added"``, ``"replaced"`` or ``"kept"``.
        """
        old = self.find(record.theta)
        if old is None:
            self.add(record)
            return "added"
        if record.objective < old.objective:
            with self._lock:
                record.id = old.id
                self.records[self.records.index(old)] = record
            return "replaced"
        return "kept"

    def thetas(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.vstack([r.theta for r in self.records])

    def subset(self, dim: int) -> "Dataset":
        """Records whose theta has dimension ``dim`` (one book count)."""
        return Dataset([r for r in self.records if r.theta.size == dim], dict(self.meta))

    # --- io
    def save(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"format": FORMAT, "version": VERSION, **self.meta}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_dict()) + "\n")

    def append_to(self, path, records: Iterable[DatasetRecord]) -> None:
        path = Path(path)
        with self._lock:
            new = not path.exists() or path.stat().st_size == 0
            with path.open("a") as fh:
                if new:
                    fh.write(json.dumps({"format": FORMAT, "version": VERSION, **self.meta}) + "\n")
                for r in records:
                    fh.write(json.dumps(r.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise DatasetError(f"{path}: empty file")
        head = json.loads(lines[0])
        if head.get("format") != FORMAT:
            raise DatasetError(f"{path}: not a dataset file")
        if int(head.get("version", -1)) > VERSION:
            raise DatasetError(f"{path}: dataset version {head['version']} is newer than {VERSION}")
        meta = {k: v for k, v in head.items() if k not in ("format", "version")}
        by_id: dict = {}
        for line in lines[1:]:
            if line.strip():
                rec = DatasetRecord.from_dict(json.loads(line))
                by_id[rec.id] = rec  # a later line with the same id is a replacement
        return cls(list(by_id.values()), meta)
