"""Exception types shared across the package.

Every failure mode that callers are expected to branch on gets its own
class; everything derives from ShockfitError so the CLI can map internal
failures to a single exit code.
"""


class ShockfitError(Exception):
    """Base class for all package errors."""


class DomainError(ShockfitError):
    """Evaluation requested at a point where the quantity is singular."""


class RangeError(ShockfitError):
    """A parameter lies outside its admissible range."""


class PreconditionError(ShockfitError):
    """An operation's precondition is not met (missing data, bad grid)."""


class ConvergenceError(ShockfitError):
    """An iterative limit failed to settle within its budget.

    Carries the last two estimates so callers can inspect the stall.
    """

    def __init__(self, message, last_estimates=None):
        super().__init__(message)
        self.last_estimates = last_estimates


class DegenerateJumpError(ShockfitError):
    """Jump quantities requested for equal left/right states."""


class InadmissibleStateError(ShockfitError):
    """Entropy or admissibility condition violated."""


class HorizonError(ShockfitError):
    """The horizon is too large for the iteration gates; caller should shrink it."""


class NoCertificateError(ShockfitError):
    """Contraction certificate not reached within the allowed horizon halvings.

    Carries the diagnostics accumulated over all attempts.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class StiffnessError(ShockfitError):
    """Characteristic integrator step size underflowed."""


class IntegrationInvariantError(ShockfitError):
    """A traced characteristic violated a structural invariant (origin crossing,
    funnel entry, speed bounds)."""


class ConfigError(ShockfitError):
    """Run configuration failed to parse or validate."""
