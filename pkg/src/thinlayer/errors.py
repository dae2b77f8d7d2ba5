"""Exception types raised across the package.

Every failure mode that callers are expected to handle has a named class;
plain ValueError/TypeError are reserved for programming errors.
"""


class ThinLayerError(Exception):
    """Base class for all package-specific errors."""


class ShapeViolation(ThinLayerError):
    """Channel shape breaks a geometric requirement (touches the cell wall, w <= 0)."""


class InvalidScale(ThinLayerError):
    """Scale parameter is not admissible (1/eps not an integer, or eps >= H)."""


class OutOfDomain(ThinLayerError):
    """Point lies outside the closure of the computational domain."""


class TimeOutOfRange(ThinLayerError):
    """Time outside [0, T]."""


class SingularJacobian(ThinLayerError):
    """Deformation Jacobian determinant fell below the configured floor."""


class NotSPD(ThinLayerError):
    """Matrix expected to be symmetric positive definite is not."""


class MeshFailure(ThinLayerError):
    """Mesh generation produced (or would produce) degenerate elements."""


class NonpositiveWeight(ThinLayerError):
    """Mass-matrix weight is not bounded away from zero."""


class UnknownTag(ThinLayerError):
    """Requested boundary/region tag does not exist on the mesh."""


class NoConvergence(ThinLayerError):
    """Iterative linear solver failed to reach the requested residual."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"linear solver stalled after {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )


class DataMismatch(ThinLayerError):
    """Problem data inconsistent with the mesh or validation rules."""


class OutOfLayer(ThinLayerError):
    """Unfolding evaluation point left the channel region of the layer."""


class LayoutMismatch(ThinLayerError):
    """Unfolded-field layouts (cell mesh / macro index set) do not agree."""


class TimeMismatch(ThinLayerError):
    """States compared at different times."""


class FoldedCell(ThinLayerError):
    """Push-forward of a cell mesh produced a nonpositive triangle area."""


class MeshMismatch(ThinLayerError):
    """Meshes passed to a coupled assembly do not fit together."""


class ConfigError(ThinLayerError):
    """Invalid configuration file or override."""

    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"config key '{key}': {reason}")


class IoError(ThinLayerError):
    """Report persistence failed."""
