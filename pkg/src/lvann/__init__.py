"""Las Vegas locality-sensitive filters for approximate near neighbor search.

An index built here never misses: whenever some stored point lies within
distance 1 of a query, the query returns a stored point within distance c.
"""

from .ball_lattice import BallLatticeFamily, BallLatticeParams, sample_family, verify_family
from .config import IndexConfig, load_config, resolve_params
from .core_math import RngStream
from .dim_reduction import TopIndex, build_top_index, query_top_index
from .errors import (ContractViolation, DecodeOverflow, DimensionMismatch, EstimationFailure,
                     InfeasibleParameters, InputError, LVError, MalformedHeader, MalformedRecord,
                     NotFound, VerificationFailure, VersionMismatch)
from .harness import brute_force_nn, estimate_mc_params, gen_planted, run_recall
from .io import load_fvecs, load_index, save_fvecs, save_index

__version__ = "0.1.0"

__all__ = [
    "BallLatticeFamily", "BallLatticeParams", "sample_family", "verify_family",
    "IndexConfig", "load_config", "resolve_params", "RngStream",
    "TopIndex", "build_top_index", "query_top_index",
    "LVError", "InputError", "DimensionMismatch", "MalformedHeader", "MalformedRecord",
    "VersionMismatch", "InfeasibleParameters", "VerificationFailure", "DecodeOverflow",
    "NotFound", "ContractViolation", "EstimationFailure",
    "brute_force_nn", "estimate_mc_params", "gen_planted", "run_recall",
    "load_fvecs", "save_fvecs", "load_index", "save_index",
]
