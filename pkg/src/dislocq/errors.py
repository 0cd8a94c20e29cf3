"""Exception hierarchy shared by all dislocq modules."""


class DislocqError(Exception):
    """Base class for every error raised by the package."""


class PreconditionError(DislocqError, ValueError):
    """An input violates a documented precondition."""


class DomainError(DislocqError, ValueError):
    """A point lies outside the region where a chart or metric is trusted."""


class InvertedElementError(DislocqError):
    """A deformation gradient with non-positive determinant was met."""

    def __init__(self, cell, message=None, iterate=None):
        self.cell = int(cell)
        self.iterate = iterate
        super().__init__(message or f"inverted element: cell {self.cell}")


class SolverError(DislocqError):
    """Conjugate gradients did not reach the requested tolerance."""

    def __init__(self, message, residual_history=()):
        self.residual_history = list(residual_history)
        super().__init__(message)


class DivergenceError(DislocqError):
    """The outer iteration exceeded its iteration budget."""

    def __init__(self, message, report=None, psi=None):
        self.report = report
        self.psi = psi
        super().__init__(message)


class MeshError(DislocqError, ValueError):
    """Base class for mesh parsing and validation errors."""


class MeshFormatError(MeshError):
    """The mesh file is malformed (bad header, counts or tokens)."""


class EmptyMeshError(MeshError):
    """The mesh has no cells."""


class DanglingNodeError(MeshError):
    """A cell or facet references a node index that does not exist."""


class NonPositiveCellError(MeshError):
    """A cell has zero or negative signed volume."""

    def __init__(self, cell, volume):
        self.cell = int(cell)
        self.volume = float(volume)
        super().__init__(f"cell {self.cell} has non-positive signed volume {self.volume!r}")


class ConfigError(DislocqError, ValueError):
    """A run configuration is missing keys or has invalid values."""
