"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(IOError):
    """Bad, truncated or version-mismatched data files."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (e.g. diverged loss)."""


class CapacityError(MemoryError):
    """A dense allocation would exceed the configured memory cap."""
