"""Pseudo-spectral simulation of stochastic tamed Navier-Stokes on the 3-torus."""

from .field import (
    DivFreeField,
    GridMismatchError,
    InvalidFieldError,
    TorusGrid,
    leray_project,
    random_field,
    sobolev_norm_sq,
)
from .operators import TamingProfile, TransportMode, TransportNoiseSpec, psi, psi_prime, validate_noise_bound
from .coefficients import CoefficientSet, ModulusOfContinuity, Oscillation, builtin_family
from .integrator import BlowUpError, SolverConfig, Trajectory, WienerPath, simulate, step

__version__ = "0.1.0"

__all__ = [
    "BlowUpError", "CoefficientSet", "DivFreeField", "GridMismatchError", "InvalidFieldError",
    "ModulusOfContinuity", "Oscillation", "SolverConfig", "TamingProfile", "TorusGrid", "Trajectory",
    "TransportMode", "TransportNoiseSpec", "WienerPath", "builtin_family", "leray_project", "psi",
    "psi_prime", "random_field", "simulate", "sobolev_norm_sq", "step", "validate_noise_bound",
]
