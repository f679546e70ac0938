"""Exception hierarchy shared across the engine.

ValidationError maps to CLI exit code 1, NumericError to exit code 2.
"""


class ValidationError(ValueError):
    """Bad input, bad configuration, or a violated call contract."""


class ShapeError(ValidationError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(ValidationError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
