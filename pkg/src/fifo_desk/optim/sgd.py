"""SGD with heavy-ball momentum."""

import numpy as np

from fifo_desk.optim.base import Optimizer, ParamGroup
from fifo_desk.tensorcore.tensor import Array, Tensor


class MomentumSGD(Optimizer):
    """v <- momentum * v + g; p <- p - lr * v (no dampening, no Nesterov)."""

    def __init__(self, groups: list[ParamGroup], momentum: float = 0.9) -> None:
        super().__init__(groups)
        if not 0.0 <= momentum < 1.0:
            msg = f"momentum must lie in [0, 1), got {momentum}"
            raise ValueError(msg)
        self.momentum = momentum

    @property
    def name(self) -> str:
        return "SGD"

    def _update(self, index: int, param: Tensor, grad: Array, lr: float) -> None:
        state = self.state.setdefault(index, {"velocity": np.zeros_like(param.data)})
        velocity = self.momentum * state["velocity"] + grad
        state["velocity"] = velocity
        param.data -= lr * velocity
