"""Shared exception types."""


class NumericError(RuntimeError):
    """A numeric routine failed (divergence, non-finite values, ...)."""


class BoundViolationError(NumericError):
    """A proven distance bound was violated beyond tolerance: solver bug."""


class DegenerateRunsError(NumericError):
    """Every adversarial run produced a non-finite selection objective."""


class SchemaError(ValueError):
    """An input file violated its documented schema."""
