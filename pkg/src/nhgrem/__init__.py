"""Nonhierarchical generalized random energy models: chains, fields, Gibbs measures and cascades."""

__version__ = "0.1.0"

from .errors import GremError, GremWarning, ValidationError
from .model import (BUILTIN_NAMES, ModelSpec, builtin_model, check_irreducibility, load_model_file,
                    subset, members, validate_model)
from .chain import Chain, LevelData, build_chain, coarse_grain, find_critical_subsets, free_energy, solve
from .field import compute_centering, sample_field, size_params
from .gibbs import gibbs_table, marked_pair_measure, ultrametric_stats
from .cascade import CascadeSpec, estimate_critical_constants, sample_cascade, sample_pd
from .stats import ComparisonReport, ks_distance, moment_check, poisson_count_test, structure_probe

__all__ = [
    "GremError", "GremWarning", "ValidationError",
    "BUILTIN_NAMES", "ModelSpec", "builtin_model", "check_irreducibility", "load_model_file",
    "subset", "members", "validate_model",
    "Chain", "LevelData", "build_chain", "coarse_grain", "find_critical_subsets", "free_energy", "solve",
    "compute_centering", "sample_field", "size_params",
    "gibbs_table", "marked_pair_measure", "ultrametric_stats",
    "CascadeSpec", "estimate_critical_constants", "sample_cascade", "sample_pd",
    "ComparisonReport", "ks_distance", "moment_check", "poisson_count_test", "structure_probe",
]
