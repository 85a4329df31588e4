"""DBSCAN on solution coordinates, a random forest on parameters, and the
per-cluster occupied grid cells used to build reduced programs."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from sklearn.tree import DecisionTreeClassifier

from ..envelope import ANGLE, Grid, restrict_grid
from .dataset import Dataset
from .knn import standardizer

NOISE = -1


class AllNoise(RuntimeError):
    pass


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; a point counts itself as a neighbour.

    Core points are labelled by connected component in order of their lowest
    index; a border point joins the cluster of its lowest-index core
    neighbour.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    X = np.asarray(points, dtype=float)
    n = len(X)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(X)
    nbrs = [sorted(v) for v in tree.query_ball_point(X, eps)]
    core = np.array([len(v) >= min_pts for v in nbrs])
    c = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = c
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in nbrs[p]:
                if core[q] and labels[q] == NOISE:
                    labels[q] = c
                    queue.append(q)
        c += 1
    for i in range(n):
        if core[i]:
            continue
        cores = [q for q in nbrs[i] if core[q]]
        if cores:
            labels[i] = labels[cores[0]]
    return labels


def k_distance(points, k: int) -> np.ndarray:
    """Sorted distance of each point to its k-th nearest other point."""
    X = np.asarray(points, dtype=float)
    kk = min(k + 1, len(X))
    d, _ = cKDTree(X).query(X, k=kk)
    d = np.atleast_2d(d)
    return np.sort(d[:, -1])


def elbow_eps(points, k: int = 4) -> float:
    """Elbow of the sorted k-distance curve: the point farthest from the chord."""
    kd = k_distance(points, k)
    n = len(kd)
    if n < 3:
        return float(kd[-1]) if n else 1.0
    t = np.linspace(0.0, 1.0, n)
    span = kd[-1] - kd[0]
    y = (kd - kd[0]) / span if span > 0 else np.zeros(n)
    # distance below the chord from (0,0) to (1,1)
    gap = t - y
    eps = float(kd[int(np.argmax(gap))])
    return eps if eps > 0 else float(max(kd[-1], 1e-9))


# --- features ------------------------------------------------------------------------

def solution_features(template, x) -> tuple:
    """``(keys, classes, values)`` of the nonconvex coordinates of a base point.

    Angles are recovered from their (cos, sin) pair; keys follow the grid's
    naming so occupied cells can be restricted directly.
    """
    from ..model import layout_of

    L = layout_of(template)
    x = np.asarray(x, dtype=float)
    keys, classes, values = [], [], []
    for kind, _, idx in L.nonconvex_indices():
        if kind == "theta":
            c, s = idx
            name = next(k for k, ci, si in template.meta["angle_pairs"] if ci == c)
            keys.append(name)
            classes.append(ANGLE)
            values.append(math.atan2(x[s], x[c]))
        else:
            v = idx[0]
            keys.append(template.variables[v].name)
            classes.append(template.variables[v].tag)
            values.append(float(x[v]))
    return keys, classes, np.array(values)


# --- forest ----------------------------------------------------------------------------

@dataclass
class Forest:
    n_trees: int = 100
    max_depth: int = 12
    seed: int = 0
    trees: list = field(default_factory=list)

    def fit(self, X, y) -> "Forest":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        rng = np.random.default_rng(self.seed)
        seeds = rng.integers(0, 2**31 - 1, size=self.n_trees)
        self.trees = []
        for s in seeds:
            r = np.random.default_rng(int(s))
            idx = r.integers(0, len(X), size=len(X))
            tree = DecisionTreeClassifier(max_depth=self.max_depth, max_features="sqrt",
                                          random_state=int(s))
            tree.fit(X[idx], y[idx])
            self.trees.append(tree)
        return self

    def votes(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n_labels = 1 + max(int(t.classes_.max()) for t in self.trees)
        out = np.zeros((len(X), n_labels), dtype=int)
        for t in self.trees:
            pred = t.predict(X).astype(int)
            out[np.arange(len(X)), pred] += 1
        return out

    def predict(self, X) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lower label
        return np.argmax(self.votes(X), axis=1)


@dataclass
class ClusterModel:
    n_clusters: int
    occupied: dict  # label -> {scalar key: tuple of cells}
    forest: Forest
    eps: float
    min_pts: int
    labels: np.ndarray  # per training record, noise included
    record_ids: tuple
    grid: Grid

    def reduced_grid(self, label: int) -> Grid:
        return restrict_grid(self.grid, self.occupied[label])

    def reduced_bits(self, label: int) -> int:
        from ..envelope import n_bits
        g = self.reduced_grid(label)
        return sum(n_bits(len(v)) for v in g.restrict.values())


def fit_clusters(dataset: Dataset, grid: Grid, template, eps: Optional[float] = None, min_pts: int = 4,
                 n_trees: int = 100, max_depth: int = 12, seed: int = 0) -> ClusterModel:
    """Cluster solutions, record occupied cells per cluster, train the classifier.

    ``template`` is a base program with the dataset's book count (variable
    layout and names).  ``eps=None`` picks the k-distance elbow.
    """
    if len(dataset) == 0:
        from .dataset import EmptyDataset
        raise EmptyDataset("cannot cluster an empty dataset")
    feats = [solution_features(template, r.x) for r in dataset.records]
    keys, classes = feats[0][0], feats[0][1]
    F = np.vstack([f[2] for f in feats])
    mu, sd = standardizer(F)
    Z = (F - mu) / sd
    if eps is None:
        eps = elbow_eps(Z, min_pts)
    labels = dbscan(Z, eps, min_pts)
    C = int(labels.max()) + 1
    if C == 0:
        raise AllNoise(f"DBSCAN found no cluster (eps={eps:.4g}, min_pts={min_pts})")
    occupied = {}
    for c in range(C):
        members = np.flatnonzero(labels == c)
        occ = {}
        for j, (key, cls_name) in enumerate(zip(keys, classes)):
            ax = grid.axis(key, cls_name)
            occ[key] = tuple(sorted({ax.cell_of(F[m, j]) for m in members}))
        occupied[c] = occ
    keep = labels != NOISE
    thetas = dataset.thetas()
    forest = Forest(n_trees, max_depth, seed).fit(thetas[keep], labels[keep])
    for r, lab in zip(dataset.records, labels):
        r.cluster = int(lab)
    return ClusterModel(C, occupied, forest, float(eps), min_pts, labels,
                        tuple(r.id for r in dataset.records), grid)


def classify(model: ClusterModel, theta) -> int:
    return int(model.forest.predict(np.asarray(theta, dtype=float)[None, :])[0])


def in_cluster(model: ClusterModel, label: int, template, x) -> bool:
    """Whether every nonconvex coordinate of ``x`` lies in the cluster's occupied cells."""
    keys, classes, values = solution_features(template, x)
    occ = model.occupied[label]
    for key, cls_name, v in zip(keys, classes, values):
        if model.grid.axis(key, cls_name).cell_of(v) not in occ[key]:
            return False
    return True
