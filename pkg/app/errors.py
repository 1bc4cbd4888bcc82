"""
Exception hierarchy for the nlsmod toolkit.

Every error raised on purpose by the library derives from NlsModError so the
CLI can turn it into a one-line message and a non-zero exit status.
"""

from typing import Any, Optional


class NlsModError(Exception):
    """Base class for all toolkit errors."""


class GridMismatchError(NlsModError, ValueError):
    """Two fields combined in one operation live on different grids."""


class NonFiniteFieldError(NlsModError, ArithmeticError):
    """An operation produced NaN or Inf samples."""


class ConfigError(NlsModError):
    """A configuration file could not be read or failed validation."""


class FieldFormatError(NlsModError):
    """A binary field dump is malformed."""


class NonConvergenceError(NlsModError):
    """
    An iterative solver stopped before meeting its tolerance.

    Attributes:
        last_iterate: The final iterate reached before giving up
        report: Solver diagnostics, when the solver produces them
    """

    def __init__(
        self, message: str, last_iterate: Any = None, report: Optional[Any] = None
    ):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.report = report


class VortexBranchError(NonConvergenceError):
    """The Step-3 scaling collapsed: no vortex exists on this branch."""


class NearSingularOperatorError(NlsModError):
    """Krylov iteration stagnated on the linearized vortex operator."""


class ModulationDegeneracyError(NlsModError):
    """The 2x2 rate matrix became singular at the given time."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class TrajectoryBoundError(NlsModError):
    """The collective coordinate w left its configured safety bound."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class ExperimentStageError(NlsModError):
    """A stage of an experiment failed; wraps the underlying error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"experiment stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
