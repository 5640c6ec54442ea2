"""Exception types shared across the package."""


class TaylorformerError(Exception):
    """Base class for all package errors."""


class ShapeError(TaylorformerError, ValueError):
    """Tensor dimensions do not line up."""


class ConfigError(TaylorformerError, ValueError):
    """Invalid configuration or a construction bug (e.g. an empty mask row)."""


class ContractError(TaylorformerError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(TaylorformerError, ValueError):
    """Bad input data: parse failures, unusable splits, missing files."""


class GenerationError(TaylorformerError, RuntimeError):
    """Synthetic data generation failed (e.g. covariance not factorizable)."""


class NumericError(TaylorformerError, RuntimeError):
    """Non-finite values where finite ones are required."""
