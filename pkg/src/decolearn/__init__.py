"""Decentralized aggregation and federated mixture learning over consensus networks."""
from . import consensus, graph, learning, privacy, sharing, simnet
from .consensus import ConsensusRun, estimate_iterations, relative_error, run_consensus
from .graph import (
    Graph,
    build_graph,
    build_inverse_chord_expander,
    build_random_regular,
    build_ring,
    spectral_gap,
    transition_matrix,
)
from .learning import FederatedGaussianMixture, federated_em, glasso
from .privacy import AttackScenario, BreachReport, collusion_breach, eaves_breach
from .sharing import chunked_aggregate, consensus_aggregate, shamir_aggregate
from .simnet import SimConfig, breach_oracle, monte_carlo_breach, run_protocol

__version__ = "0.1.0"

__all__ = [
    "AttackScenario",
    "BreachReport",
    "ConsensusRun",
    "FederatedGaussianMixture",
    "Graph",
    "SimConfig",
    "breach_oracle",
    "build_graph",
    "build_inverse_chord_expander",
    "build_random_regular",
    "build_ring",
    "chunked_aggregate",
    "collusion_breach",
    "consensus",
    "consensus_aggregate",
    "eaves_breach",
    "estimate_iterations",
    "federated_em",
    "glasso",
    "graph",
    "learning",
    "monte_carlo_breach",
    "privacy",
    "relative_error",
    "run_consensus",
    "run_protocol",
    "shamir_aggregate",
    "sharing",
    "simnet",
    "spectral_gap",
    "transition_matrix",
]
