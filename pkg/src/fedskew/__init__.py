"""Federated averaging simulator with Dirichlet label-skewed client populations."""

from .config import ExperimentConfig, load_config
from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar10
from .harness import (
    effective_learning_rate,
    run_experiment,
    run_sweep,
    select_best,
)
from .numerics import Batch, ModelSpec, evaluate, init_params, loss_and_grad
from .partition import (
    Population,
    population_stats,
    sample_dirichlet,
    sort_and_partition,
    synthesize_population,
)
from .protocol import (
    ClientConfig,
    ServerOptimizerConfig,
    ServerState,
    aggregate,
    client_update,
    sample_clients,
    server_step,
)

__version__ = "0.1.0"
