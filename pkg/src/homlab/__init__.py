"""Numerical laboratory for boundary-obstacle energy minimization.

The package builds the fine-scale constrained minimization over a lattice of
vanishing boundary patches, the explicit corrector/auxiliary/density
functions attached to that lattice, and the homogenized limit problem with
its capacity-density boundary penalty, then verifies every scaling estimate
and limit numerically at desk scale.
"""

from .errors import (
    ConfigError,
    ConfigSyntaxError,
    ConfigValueError,
    DegenerateScalingError,
    EllipticityError,
    GeometryError,
    HomlabError,
    KernelError,
    NodeBudgetError,
    ResolutionError,
    SolverError,
    UnknownKeyError,
)

__all__ = [
    "ConfigError",
    "ConfigSyntaxError",
    "ConfigValueError",
    "DegenerateScalingError",
    "EllipticityError",
    "GeometryError",
    "HomlabError",
    "KernelError",
    "NodeBudgetError",
    "ResolutionError",
    "SolverError",
    "UnknownKeyError",
]

__version__ = "0.1.0"
