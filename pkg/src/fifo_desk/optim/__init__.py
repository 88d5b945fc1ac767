"""Optimizers and their name registry."""

import importlib
import logging
from typing import Any, cast

from fifo_desk.optim.base import Optimizer, ParamGroup

logger = logging.getLogger(__name__)

# Optimizer registry - maps names to (module path, class name)
OPTIMIZER_REGISTRY: dict[str, tuple[str, str]] = {
    "SGD": ("fifo_desk.optim.sgd", "MomentumSGD"),
    "Adamax": ("fifo_desk.optim.adamax", "Adamax"),
}


def get_optimizer(name: str, groups: list[ParamGroup], **hyper: Any) -> Optimizer:
    """Create an optimizer by registry name.

    Args:
        name: Registry name ("SGD" or "Adamax")
        groups: Parameter groups to optimize
        **hyper: Optimizer-specific constants (momentum, beta1, ...)

    Returns:
        An instance of the requested optimizer

    Raises:
        ValueError: If the optimizer is unknown or cannot be constructed
    """
    if name not in OPTIMIZER_REGISTRY:
        msg = f"Unknown optimizer: {name}. Available optimizers: {get_available_optimizer_names()}"
        raise ValueError(msg)

    module_path, class_name = OPTIMIZER_REGISTRY[name]
    try:
        module = importlib.import_module(module_path)
    except ImportError as e:
        logger.exception("Failed to import optimizer module: %s", module_path)
        msg = f"Failed to import optimizer '{name}': {e}"
        raise ValueError(msg) from e

    optimizer_class = getattr(module, class_name, None)
    if optimizer_class is None:
        msg = f"Optimizer class '{class_name}' not found in module '{module_path}'"
        raise ValueError(msg)

    logger.debug("Created optimizer %s for groups %s", name, [g.name for g in groups])
    return cast(Optimizer, optimizer_class(groups, **hyper))


def get_available_optimizer_names() -> list[str]:
    return list(OPTIMIZER_REGISTRY)


__all__ = ["Optimizer", "ParamGroup", "get_available_optimizer_names", "get_optimizer"]
