"""Adamax: Adam with an infinity-norm second moment."""

import numpy as np

from fifo_desk.optim.base import Optimizer, ParamGroup
from fifo_desk.tensorcore.tensor import Array, Tensor


class Adamax(Optimizer):
    """Adamax update.

    m <- beta1 * m + (1 - beta1) * g
    u <- max(beta2 * u, |g| + eps)
    p <- p - lr / (1 - beta1^t) * m / u
    """

    def __init__(
        self,
        groups: list[ParamGroup],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        super().__init__(groups)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0) or eps <= 0:
            msg = f"invalid Adamax constants beta1={beta1}, beta2={beta2}, eps={eps}"
            raise ValueError(msg)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @property
    def name(self) -> str:
        return "Adamax"

    def _update(self, index: int, param: Tensor, grad: Array, lr: float) -> None:
        state = self.state.setdefault(
            index,
            {
                "exp_avg": np.zeros_like(param.data),
                "exp_inf": np.zeros_like(param.data),
                "step": np.zeros(()),
            },
        )
        state["step"] = state["step"] + 1
        t = float(state["step"])
        state["exp_avg"] = self.beta1 * state["exp_avg"] + (1.0 - self.beta1) * grad
        state["exp_inf"] = np.maximum(self.beta2 * state["exp_inf"], np.abs(grad) + self.eps)
        bias_correction = 1.0 - self.beta1**t
        param.data -= (lr / bias_correction) * state["exp_avg"] / state["exp_inf"]
