"""Nearest-neighbour retrieval on standardized parameter vectors."""
from __future__ import annotations

import numpy as np

from .dataset import Dataset, EmptyDataset


def standardizer(X: np.ndarray):
    """Per-feature mean and std; constant features get unit scale."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd <= 1e-12] = 1.0
    return mu, sd


def knn_query(dataset: Dataset, theta, k: int, worst: bool = False, return_distance: bool = False):
    """The ``k`` records closest to ``theta`` (farthest first when ``worst``).

    Distances are Euclidean after z-scoring with the dataset's statistics;
    ties go to the lower record id.
    """
    if len(dataset) == 0:
        raise EmptyDataset("knn query on an empty dataset")
    if k < 1:
        raise ValueError("k must be >= 1")
    X = dataset.thetas()
    theta = np.asarray(theta, dtype=float)
    if theta.shape != X.shape[1:]:
        raise ValueError(f"theta has dimension {theta.size}, dataset {X.shape[1]}")
    mu, sd = standardizer(X)
    d = np.linalg.norm((X - mu) / sd - (theta - mu) / sd, axis=1)
    ids = np.array([r.id for r in dataset.records])
    order = np.lexsort((ids, -d if worst else d))
    order = order[: min(k, len(order))]
    recs = [dataset.records[i] for i in order]
    if return_distance:
        return recs, d[order]
    return recs
