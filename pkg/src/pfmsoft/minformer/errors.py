"""Exception types and the stable CLI exit codes they map to."""

from enum import IntEnum


class ExitCode(IntEnum):
    """Process exit codes for the ``minformer`` command."""

    OK = 0
    UNEXPECTED = 1
    USAGE = 2
    IO = 3
    NUMERIC = 4
    VERIFY_FAILED = 5


class MinformerError(Exception):
    """Base class for all errors raised by minformer."""


class ConfigError(MinformerError, ValueError):
    """An invalid configuration value or file."""


class VariantError(ConfigError):
    """An illegal attention variant combination, or params of the wrong variant."""


class ShapeError(MinformerError, ValueError):
    """Operands with incompatible shapes."""


class DataFormatError(MinformerError, ValueError):
    """A dataset or checkpoint file that does not match its binary format."""


class NumericError(MinformerError, ArithmeticError):
    """A NaN or infinite value where finite values are required.

    Args:
        message: Description of the failure.
        epoch: Training epoch, when raised from the training loop.
        batch: Minibatch index within the epoch.
        loss_trace: The most recent minibatch losses, oldest first.
    """

    def __init__(
        self,
        message: str,
        epoch: int | None = None,
        batch: int | None = None,
        loss_trace: list[float] | None = None,
    ) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.loss_trace = loss_trace or []


def exit_code_for(error: BaseException) -> ExitCode:
    """Map an exception to the exit code the CLI reports for it."""
    if isinstance(error, ConfigError):
        return ExitCode.USAGE
    if isinstance(error, (OSError, DataFormatError)):
        return ExitCode.IO
    if isinstance(error, NumericError):
        return ExitCode.NUMERIC
    return ExitCode.UNEXPECTED
