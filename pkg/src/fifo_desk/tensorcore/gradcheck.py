"""Finite-difference oracle for recorded gradients."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence

import numpy as np

from fifo_desk.errors import GradCheckError
from fifo_desk.tensorcore.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_TENSOR = 50
MAX_RESAMPLES = 25


def _analytic_pass(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor]
) -> tuple[list[np.ndarray], float]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    margin = tape.min_kink_margin()
    tape.clear()
    return grads, margin


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    seed: int = 0,
    samples: int = MIN_SAMPLES_PER_TENSOR,
    resample: Callable[[np.random.Generator], None] | None = None,
) -> float:
    """Compare recorded gradients with central differences.

    Args:
        loss_fn: Deterministic function returning a scalar tensor built from params
        params: Tensors whose gradients are checked (must require gradients)
        epsilon: Central-difference step, within [1e-7, 1e-4]
        seed: Seed for coordinate sampling and resampling
        samples: Coordinates sampled per tensor (all coordinates when fewer)
        resample: Redraws the evaluation point in place; called while some
            piecewise operation has an input closer than 10 * epsilon to its kink

    Returns:
        Maximum relative error over the sampled coordinates

    Raises:
        ValueError: If epsilon is out of range or samples < 1
        GradCheckError: If the loss is non-finite at a perturbed point, or the
            point stays on a kink after MAX_RESAMPLES resamples
    """
    if not 1e-7 <= epsilon <= 1e-4:
        msg = f"epsilon must lie in [1e-7, 1e-4], got {epsilon}"
        raise ValueError(msg)
    if samples < 1:
        msg = f"samples must be positive, got {samples}"
        raise ValueError(msg)

    rng = np.random.default_rng(seed)
    grads, margin = _analytic_pass(loss_fn, params)
    attempts = 0
    while margin < 10 * epsilon and resample is not None and attempts < MAX_RESAMPLES:
        resample(rng)
        grads, margin = _analytic_pass(loss_fn, params)
        attempts += 1
    if margin < 10 * epsilon:
        if resample is not None:
            msg = (
                f"evaluation point still lies {margin:.3g} from a kink "
                f"(epsilon {epsilon:.3g}) after {attempts} resamples"
            )
            raise GradCheckError(msg)
        logger.warning(
            "Evaluation point lies %.3g from a kink (epsilon %.3g) and no resample is given",
            margin,
            epsilon,
        )

    worst = 0.0
    for index, (param, analytic) in enumerate(zip(params, grads, strict=True)):
        size = param.data.size
        flat = (
            np.arange(size)
            if size <= samples
            else np.sort(rng.choice(size, size=samples, replace=False))
        )
        for flat_index in flat:
            coord = tuple(int(c) for c in np.unravel_index(int(flat_index), param.shape))
            original = param.data[coord]
            param.data[coord] = original + epsilon
            plus = loss_fn().item()
            param.data[coord] = original - epsilon
            minus = loss_fn().item()
            param.data[coord] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                msg = f"non-finite loss perturbing parameter {index} at coordinate {coord}"
                raise GradCheckError(msg, index, coord)
            numeric = (plus - minus) / (2 * epsilon)
            exact = float(analytic[coord])
            denom = max(abs(exact), abs(numeric), 1e-12)
            worst = max(worst, abs(exact - numeric) / denom)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
