"""Galerkin simulator and large-deviation toolkit for the stochastic 2D Boussinesq system."""

__version__ = "0.1.0"

from .spectral_core import (Domain, GalerkinBasis, SpectralField, build_basis,  # noqa: F401
                            random_field)
from .operators import PhysicsParams  # noqa: F401
from .noise import ControlPath, CovarianceSpec, make_sigma  # noqa: F401
from .integrators import BenardModel, IntegratorConfig, run_skeleton, run_stochastic  # noqa: F401
