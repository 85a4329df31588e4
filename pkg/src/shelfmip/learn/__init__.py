"""Data-driven layer: dataset, retrieval, clustering and integer strategies."""
from .dataset import Dataset, DatasetError, DatasetRecord, EmptyDataset
from .knn import knn_query
from .cluster import NOISE, AllNoise, ClusterModel, Forest, classify, dbscan, elbow_eps, fit_clusters, in_cluster
from .strategy import IntegerStrategy, NonIntegralPoint, discretize_cells, discretize_solution, extract_strategy
from .bootstrap import BootstrapConfig, BootstrapReport, bootstrap_dataset

__all__ = [
    "Dataset", "DatasetError", "DatasetRecord", "EmptyDataset", "knn_query", "NOISE", "AllNoise", "ClusterModel",
    "Forest", "classify", "dbscan", "elbow_eps", "fit_clusters", "in_cluster", "IntegerStrategy",
    "NonIntegralPoint", "discretize_cells", "discretize_solution", "extract_strategy", "BootstrapConfig",
    "BootstrapReport", "bootstrap_dataset",
]
