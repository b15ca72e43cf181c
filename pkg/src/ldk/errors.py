"""Exception hierarchy shared by every ldk module.

Each class carries a short machine-greppable ``category`` that the CLI prints
on stderr and maps to an exit code (usage 2, validation 3, io 4, numerical 5).
Library code raises these directly; nothing here depends on the rest of ldk.
"""

from __future__ import annotations


class LdkError(Exception):
    """Base class for all ldk failures."""

    category = "error"


class UsageError(LdkError):
    """Bad flag or argument values (CLI surface only)."""

    category = "usage"


class ValidationError(LdkError):
    """Data violates a documented invariant."""

    category = "validation"


class FormatError(ValidationError):
    """A file exists but its contents do not parse or self-describe wrongly."""

    category = "format"


class DomainError(ValidationError):
    """An argument is outside the mathematical domain of an operation."""

    category = "domain"


class ProjectionError(DomainError):
    """A point cannot be projected (behind the camera / outside the model)."""

    category = "projection"


class NumericalError(LdkError):
    """A numerical procedure failed to produce a usable result."""

    category = "numerical"


class OptimizationError(NumericalError):
    """Refinement diverged. ``last_result`` holds the last finite state."""

    category = "numerical"

    def __init__(self, message: str, last_result=None):
        super().__init__(message)
        self.last_result = last_result


class RegistrationError(NumericalError):
    """ICP could not align the clouds (too few or degenerate correspondences)."""

    category = "numerical"
