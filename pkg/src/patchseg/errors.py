"""Exception types shared across the package."""


class PatchsegError(Exception):
    """Base class for all package errors."""


class ShapeError(PatchsegError, ValueError):
    """Array has the wrong shape or incompatible dimensions."""


class NumericError(PatchsegError, ValueError):
    """Non-finite values or values outside their numeric domain."""


class ConfigError(PatchsegError, ValueError):
    """Invalid configuration value or combination."""


class DataError(PatchsegError, ValueError):
    """Missing, corrupt, or malformed files and datasets."""


class GenerationError(PatchsegError, ValueError):
    """Synthetic sample generation cannot satisfy its constraints."""


class DivergenceError(PatchsegError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str):
        super().__init__(f"divergence at step {step}: {message}")
        self.step = step
