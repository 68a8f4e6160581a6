"""Exception types shared across the package."""


class AlignCruseError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(AlignCruseError):
    """Invalid configuration value (bad window length, sample rate, ranges...)."""


class ShapeError(AlignCruseError):
    """Tensor/frame shape does not match what the operation requires."""


class NumericsError(AlignCruseError):
    """Non-finite value produced, or numeric failure (divergence, NaN gradient)."""


class NoSignalError(AlignCruseError):
    """An operation that needs signal energy received silence."""


class ContractViolationError(AlignCruseError):
    """A documented call contract was broken (reused graph, negative mask...)."""
