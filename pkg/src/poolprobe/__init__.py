"""Graph pooling ablation laboratory.

Hierarchical pooling GNNs (Graclus, complement matching, DiffPool, memory
pooling) with random-assignment controls, a small reverse-mode autodiff
engine, and diagnostics for embedding homogeneity and permutation
invariance.
"""

from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .graph import Graph, Partition, coarsen_hard, coarsen_soft, complement, permute
from .clustering import complement_matching, graclus_matching, sample_random_assignment
from .losses import LossWeights
from .models import DatasetStats, ModelSpec, build_model, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit_and_evaluate, train_run
from .data import gen_synthetic, load_tu_dataset, read_results, write_results
from .estimators import (GraphPoolingClassifier, GraphPoolingRegressor, MeanFeatures,
                         make_structure_agnostic_baseline)
from .analysis import homogeneity, homogeneity_report, invariance_report

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "TrainingError",
    "Graph", "Partition", "coarsen_hard", "coarsen_soft", "complement", "permute",
    "complement_matching", "graclus_matching", "sample_random_assignment",
    "LossWeights", "DatasetStats", "ModelSpec", "build_model", "forward",
    "load_checkpoint", "save_checkpoint", "TrainConfig", "fit_and_evaluate", "train_run",
    "gen_synthetic", "load_tu_dataset", "read_results", "write_results",
    "GraphPoolingClassifier", "GraphPoolingRegressor", "MeanFeatures",
    "make_structure_agnostic_baseline", "homogeneity", "homogeneity_report",
    "invariance_report",
]
