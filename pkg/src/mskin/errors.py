"""Exception hierarchy shared by the mskin modules."""

from __future__ import annotations


class MskinError(Exception):
    """Base class for every error raised by the package."""


class DomainError(MskinError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ParameterError(DomainError):
    """A tuning parameter (delta, tolerance, grid size) is inadmissible."""


class DegenerateInputError(DomainError):
    """Input data carry no usable information (zero mass, empty box)."""


class SolvabilityError(MskinError):
    """A right-hand side violates the solvability condition of a singular system."""


class InitialDataError(MskinError):
    """Initial data violate positivity or compatibility requirements."""


class CompatibilityError(InitialDataError):
    """Initial data violate the flux-force compatibility relation."""


class PositivityError(MskinError):
    """Concentrations or temperature lost positivity during a step."""


class StepSizeError(MskinError):
    """A time step produced an inadmissible state; a smaller step is advised."""


class IterationDivergenceError(MskinError):
    """A fixed-point iteration failed to converge."""

    def __init__(self, message: str, differences: list[float] | None = None):
        super().__init__(message)
        self.differences = list(differences or [])


class InvariantFailure(MskinError):
    """A verified structural property failed numerically."""


class SizeError(MskinError):
    """A discretization exceeds the configured size budget."""


class ConfigError(MskinError):
    """A scenario configuration is malformed or inconsistent."""
