"""Exception hierarchy shared by all homlab modules."""


class HomlabError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(HomlabError):
    """Invalid domain, patch layout, or mesh request."""


class ResolutionError(GeometryError):
    """Mesh spacing too coarse to resolve the patch radii."""


class NodeBudgetError(GeometryError):
    """Requested mesh exceeds the configured node-count cap."""


class KernelError(HomlabError):
    """Invalid kernel evaluation (coincident points, bad stencil step)."""


class EllipticityError(HomlabError):
    """Coefficient matrix violates the uniform ellipticity bounds."""


class DegenerateScalingError(HomlabError):
    """Patch scaling hits a degenerate denominator (eps * r~^(n-2) == 1)."""


class SolverError(HomlabError):
    """Linear or nonlinear solve failed in a non-recoverable way."""


class ConfigError(HomlabError):
    """Base class for configuration problems; carries the offending key path."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ConfigSyntaxError(ConfigError):
    """Configuration document is not well formed."""


class UnknownKeyError(ConfigError):
    """Configuration contains a key the schema does not define."""


class ConfigValueError(ConfigError):
    """Configuration value violates an invariant."""
