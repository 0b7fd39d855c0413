"""Federated Gaussian mixture learning."""
from .estimator import FederatedGaussianMixture
from .glasso import glasso, kkt_residual
from .mixture import (
    AggregatorConfig,
    Dataset,
    EMResult,
    GlobalStats,
    LocalStats,
    MixtureParams,
    aggregate_stats,
    federated_em,
    initialize_responsibilities,
    local_stats,
    penalized_objective,
    responsibilities,
    update_gaussian_params,
    update_pi,
)

__all__ = [
    "AggregatorConfig",
    "Dataset",
    "EMResult",
    "FederatedGaussianMixture",
    "GlobalStats",
    "LocalStats",
    "MixtureParams",
    "aggregate_stats",
    "federated_em",
    "glasso",
    "initialize_responsibilities",
    "kkt_residual",
    "local_stats",
    "penalized_objective",
    "responsibilities",
    "update_gaussian_params",
    "update_pi",
]
