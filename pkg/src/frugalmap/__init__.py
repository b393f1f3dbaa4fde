"""Exact and approximate MAP explanations for discrete Bayesian networks.

Exact MAP by variable elimination, Annealed MAP, and the Sampled-MFE family
(MFE, MFE+, MFE+A), which marginalises only the intermediate variables that
are relevant to the explanation and samples the rest.
"""

__version__ = "0.1.0"

from .errors import FrugalMapError, ParseError, ResourceError, StaleTableError, ValidationError
from .model import FactorGraph, Network, load_factor_graph, patch_determinism, read_network, to_factor_graph
from .query import MapQuery, MapResult, Partition
from .engine import brute_force_joint, eliminate
from .relevance import RelevanceTable, estimate_relevance, precompute_table
from .solvers import SOLVERS, AnnealSchedule, annealed_map, exact_map, sampled_mfe, solve

__all__ = [
    "FrugalMapError", "ParseError", "ResourceError", "StaleTableError", "ValidationError",
    "FactorGraph", "Network", "load_factor_graph", "patch_determinism", "read_network", "to_factor_graph",
    "MapQuery", "MapResult", "Partition", "brute_force_joint", "eliminate",
    "RelevanceTable", "estimate_relevance", "precompute_table",
    "SOLVERS", "AnnealSchedule", "annealed_map", "exact_map", "sampled_mfe", "solve",
]
