"""Certified key-rate lower bounds for decoy BB84 and MDI-QKD under Trojan-horse leakage."""

from .channel import ChannelParams, DetectionStats, IntensitySet, simulate_stats, stats_from_csv
from .decoy import DecoyBounds, compute_decoy_bounds
from .gllp import GllpInputs, binary_entropy, ex_prime, gllp_bb84_rate, gllp_mdi_rate, ideal_single_photon_rate
from .hermitian import DomainError, ValidationError
from .pipeline import (
    KeyRateReport,
    RunConfig,
    compute_keyrate,
    optimize_signal_intensity,
    reports_from_csv,
    reports_to_csv,
    scan_distance,
)
from .protocols import GZMaps, ProtocolSpec, build_bb84, build_mdi
from .solver import ConstraintSet, InfeasibleConstraints, NumericalFailure, frank_wolfe, linearized_subproblem

__version__ = "0.1.0"

__all__ = [
    "ChannelParams",
    "ConstraintSet",
    "DecoyBounds",
    "DetectionStats",
    "DomainError",
    "GZMaps",
    "GllpInputs",
    "InfeasibleConstraints",
    "IntensitySet",
    "KeyRateReport",
    "NumericalFailure",
    "ProtocolSpec",
    "RunConfig",
    "ValidationError",
    "binary_entropy",
    "build_bb84",
    "build_mdi",
    "compute_decoy_bounds",
    "compute_keyrate",
    "ex_prime",
    "frank_wolfe",
    "gllp_bb84_rate",
    "gllp_mdi_rate",
    "ideal_single_photon_rate",
    "linearized_subproblem",
    "optimize_signal_intensity",
    "reports_from_csv",
    "reports_to_csv",
    "scan_distance",
    "simulate_stats",
    "stats_from_csv",
]
