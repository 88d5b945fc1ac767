"""Exception types for fifo-desk.

Every error raised on purpose by the package derives from FifoError. The
concrete classes also derive from the closest builtin so callers that only
know about ValueError or OSError keep working.
"""


class FifoError(Exception):
    """Base class for all fifo-desk errors."""


class ConfigError(FifoError, ValueError):
    """Invalid configuration value, config file or command-line override."""


class DatasetIOError(FifoError, OSError):
    """Dataset or checkpoint files could not be written or read."""


class ShapeError(FifoError, ValueError):
    """Tensor shapes do not satisfy an operation's shape rule."""


class DomainValueError(FifoError, ValueError):
    """A value lies outside an operation's mathematical domain.

    Raised for the log of a non-positive value, zero-norm factors, asymmetric
    Gram input and empty point sets.
    """


class LabelAccessError(FifoError, PermissionError):
    """Labels of an unlabeled (real-fog) training sample were requested."""


class TrainingAborted(FifoError, RuntimeError):
    """Training stopped because a loss became non-finite.

    Attributes:
        iteration: Iteration index at which the loss became non-finite
        phase: Training phase name
        last_checkpoint: Last checkpoint written before the failure, if any
    """

    def __init__(
        self,
        message: str,
        iteration: int,
        phase: str,
        last_checkpoint: str | None = None,
    ) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.phase = phase
        self.last_checkpoint = last_checkpoint


class GradCheckError(FifoError, ArithmeticError):
    """A gradient check could not produce a valid central difference.

    Raised for a non-finite perturbed loss, or for an evaluation point that
    stays on a kink after every resample.

    Attributes:
        param_index: Index of the perturbed parameter tensor, None for a kink
        coordinate: Multi-index of the perturbed coordinate, None for a kink
    """

    def __init__(
        self,
        message: str,
        param_index: int | None = None,
        coordinate: tuple[int, ...] | None = None,
    ) -> None:
        super().__init__(message)
        self.param_index = param_index
        self.coordinate = coordinate


class VerificationFailed(FifoError, AssertionError):
    """A case of the gradient-check battery exceeded its tolerance."""
