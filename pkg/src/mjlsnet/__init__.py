"""Robust H2 analysis of large multi-agent systems under Markovian packet loss."""

from .graphs import UndirectedGraph, build_cycle, build_triangle, laplacian, spectrum
from .loss import EdgeChain, LossModel, random_model, uniform_model
from .montecarlo import SimConfig, estimate_h2
from .oracle import h2_exact, ms_stable_exact
from .robust import RobustOptions, UncertaintyBox, robust_h2, robust_stability
from .system import DecomposableSystem, consensus_example

__all__ = [
    "UndirectedGraph",
    "build_cycle",
    "build_triangle",
    "laplacian",
    "spectrum",
    "EdgeChain",
    "LossModel",
    "random_model",
    "uniform_model",
    "SimConfig",
    "estimate_h2",
    "h2_exact",
    "ms_stable_exact",
    "RobustOptions",
    "UncertaintyBox",
    "robust_h2",
    "robust_stability",
    "DecomposableSystem",
    "consensus_example",
]

__version__ = "0.1.0"
