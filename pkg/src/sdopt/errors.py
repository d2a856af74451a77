"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed numbers, shapes or probabilities."""


class DimensionError(InvalidInputError):
    """Asset or scenario counts do not line up."""


class InvalidOrderError(InvalidInputError):
    """A dominance order or norm exponent outside its admissible range."""


class UnsupportedOrderError(InvalidOrderError):
    """The order is valid but the requested routine does not handle it."""
