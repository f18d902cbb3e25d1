"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Shapes, dimensions or object wiring do not line up."""


class NumericError(ArithmeticError):
    """A numerical routine failed (singular system, divergence, non-finite values)."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateInputError(ValueError):
    """Input is valid in shape but the requested construction is undefined for it."""


class PreconditionError(ValueError):
    pass


class NoSolutionError(ValueError):
    pass


class ExtractionError(ValueError):
    pass


class BoundViolation(AssertionError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; ``keys`` lists the offending entries."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)
