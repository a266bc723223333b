"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents do not conform."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid configuration value or key."""


class CheckpointError(RuntimeError):
    """Checkpoint contents do not match the model configuration."""


class EstimationError(ValueError):
    """A measurement could not be made from the data (e.g. no texture)."""
