"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ContractViolation(ValueError):
    """A documented precondition was not met."""


class SingularityError(ArithmeticError):
    """Division by a zero standard deviation or zero scale."""


class NonFiniteError(ArithmeticError):
    """A public operation produced NaN or Inf."""


class FormatError(ValueError):
    """A data file does not match its binary format."""
