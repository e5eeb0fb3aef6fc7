"""Decentralized nonconvex optimization with gradient tracking and quasi-Newton directions."""
from __future__ import annotations

from .directions import CurvaturePair, EigenCertificate, SchemeParams, dense_direction_oracle
from .engine import AlgoConfig, RunResult, comm_rounds, descent_coefficients, make_config, max_stepsize, preset, run
from .network import MixingMatrix, PolySpec, build_graph, metropolis_weights, path_graph, spectral_constants
from .problems import Dataset, logistic_problem, parse_libsvm, partition, synthetic_problem

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig",
    "CurvaturePair",
    "Dataset",
    "EigenCertificate",
    "MixingMatrix",
    "PolySpec",
    "RunResult",
    "SchemeParams",
    "build_graph",
    "comm_rounds",
    "dense_direction_oracle",
    "descent_coefficients",
    "logistic_problem",
    "make_config",
    "max_stepsize",
    "metropolis_weights",
    "parse_libsvm",
    "partition",
    "path_graph",
    "preset",
    "run",
    "spectral_constants",
    "synthetic_problem",
]
