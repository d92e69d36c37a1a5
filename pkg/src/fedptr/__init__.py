"""Federated learning with trajectory-matched auxiliary data and proximal regularization.

Pure numpy. Submodules:

- ``diffmodels``: small MLPs with exact gradients and Hessian-vector products
- ``data``: datasets, Dirichlet client partitions, auxiliary-set initialization
- ``trajectory``: trajectory matching, its meta-gradient, projection, windows
- ``localsolver``: proximal local solves and inexactness ratios
- ``federation``: FedAvg, FedProx, FedPTR, FedPTR-S and distill-augment rounds
- ``diagnostics``: cosines, layer norms, heterogeneity estimates
- ``harness``: experiment files, output layout, comparison suites, self-check
"""

from .data import (
    AuxiliaryDataset, ClientPartition, Dataset, dirichlet_partition, gen_synthetic_mixture,
    init_auxiliary, load_csv_dataset, train_test_split,
)
from .diffmodels import Batch, ModelSpec, ParamVector
from .federation import (
    ALGORITHMS, METRIC_COLUMNS, FedConfig, RoundMetrics, aggregate, init_state, last5_accuracy,
    run_experiment, run_round, sample_participants, write_metrics_csv,
)
from .localsolver import ProxSpec, SolverBudget, local_solve
from .trajectory import MttConfig, TrajectoryWindow, mtt_update, project_trajectory

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "METRIC_COLUMNS", "AuxiliaryDataset", "Batch", "ClientPartition", "Dataset",
    "FedConfig", "ModelSpec", "MttConfig", "ParamVector", "ProxSpec", "RoundMetrics",
    "SolverBudget", "TrajectoryWindow", "aggregate", "dirichlet_partition", "gen_synthetic_mixture",
    "init_auxiliary", "init_state", "last5_accuracy", "load_csv_dataset", "local_solve",
    "mtt_update", "project_trajectory", "run_experiment", "run_round", "sample_participants",
    "train_test_split", "write_metrics_csv",
]
