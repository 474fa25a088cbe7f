"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class StateError(RuntimeError):
    """An operation was called in the wrong lifecycle state."""
