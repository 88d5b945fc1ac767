"""Base optimizer class."""

from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field

from fifo_desk.tensorcore.tensor import Array, Tensor


@dataclass
class ParamGroup:
    """Parameters that share a learning rate.

    Attributes:
        name: Group label, e.g. "encoder"
        params: Tensors updated in place
        lr: Current learning rate
    """

    name: str
    params: list[Tensor]
    lr: float
    initial_lr: float = field(init=False)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            msg = f"learning rate of group {self.name!r} must be positive, got {self.lr}"
            raise ValueError(msg)
        self.initial_lr = self.lr


class Optimizer(ABC):
    """Base class for optimizers.

    Optimizers update the data of their parameters in place from the grad
    field filled by Tape.backward(). Parameters without a gradient are skipped.
    """

    def __init__(self, groups: Sequence[ParamGroup]) -> None:
        self.groups = list(groups)
        self.state: dict[int, dict[str, Array]] = {}
        self.steps = 0

    @property
    @abstractmethod
    def name(self) -> str:
        """Get the optimizer name.

        Returns:
            The registry name of this optimizer
        """

    @abstractmethod
    def _update(self, index: int, param: Tensor, grad: Array, lr: float) -> None:
        """Apply one update to a single parameter.

        Args:
            index: Stable position of the parameter across all groups
            param: Parameter to update in place
            grad: Its gradient
            lr: Learning rate of its group
        """

    def step(self) -> None:
        """Update every parameter that has a gradient."""
        self.steps += 1
        index = 0
        for group in self.groups:
            for param in group.params:
                if param.grad is not None:
                    self._update(index, param, param.grad, group.lr)
                index += 1

    def zero_grad(self) -> None:
        for group in self.groups:
            for param in group.params:
                param.zero_grad()

    def set_lr(self, group_name: str, lr: float) -> None:
        for group in self.groups:
            if group.name == group_name:
                group.lr = lr
                return
        msg = f"{self.name}: no parameter group named {group_name!r}"
        raise KeyError(msg)

    def lr(self, group_name: str) -> float:
        return next(g.lr for g in self.groups if g.name == group_name)

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]
