"""Belief-space MPC with surprise-regulated, rate-limited model adaptation."""
from .errors import (ConfigError, FlexMpcError, NonConverged, NumericalError, SimulationDiverged,
                     SingularCovariance)
from .gaussian import GaussianBelief, affine_push, log_density, max_eig_sqrt

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlexMpcError",
    "GaussianBelief",
    "NonConverged",
    "NumericalError",
    "SimulationDiverged",
    "SingularCovariance",
    "affine_push",
    "log_density",
    "max_eig_sqrt",
]
