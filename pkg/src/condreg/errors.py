"""Exception hierarchy shared across the package.

Each class maps to one failure family surfaced by the CLI: bad input,
solver breakdown, cover breakdown, and size limits. Keeping them in one
place lets the CLI translate exceptions to exit codes without importing
every module.
"""


class CondregError(Exception):
    """Base class for all package errors."""


class InputError(CondregError):
    """Malformed or out-of-range input (bad indices, shapes, parameters)."""


class DegreeError(InputError):
    """A polynomial or relaxation degree does not fit the requested degree."""


class ConsistencyError(CondregError):
    """Internal quantities disagree beyond tolerance (e.g. probabilities)."""


class SolverFailure(CondregError):
    """The SDP solve ended infeasible or unusable."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CoverFailure(CondregError):
    """Greedy cover ran out of eligible terms before reaching coverage."""

    def __init__(self, message, coverage=0.0, total_loss=float("nan"), details=None):
        super().__init__(message)
        self.coverage = coverage
        self.total_loss = total_loss
        self.details = details or {}


class SizeError(CondregError):
    """Problem size exceeds a hard limit (e.g. brute-force enumeration)."""


class NonIdentifiableError(CondregError):
    """Candidate projector has no null space: no hyperplane to read off."""


class DegenerateResponseError(CondregError):
    """Null space exists but never involves the response coordinate."""
