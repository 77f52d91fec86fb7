class CantrackError(Exception):
    pass


class ShapeError(CantrackError, ValueError):
    """Array dimensions do not line up."""


class ContractError(CantrackError):
    """A caller broke a precondition that is not about user data (stale cache, bad shapes between stages)."""


class ValidationError(CantrackError, ValueError):
    """User-supplied data or configuration is invalid."""


class DomainError(CantrackError, ValueError):
    """Input lies outside the mathematical domain of the operation."""
