"""Segmentation-side objectives.

Cross-entropy on labeled predictions, fog style matching between fog factors
of two domains, prediction consistency between a clear image and its
synthetic-fog counterpart, and the two per-slice objectives built from them.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from fifo_desk.errors import DomainValueError, LabelAccessError, ShapeError
from fifo_desk.fifo_types import Domain
from fifo_desk.fogpass import FogFactor
from fifo_desk.segnet import ForwardResult
from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.tensor import Tensor

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_fsm: float = 5e-8
    lambda_con: float = 1e-4
    margin: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda_fsm < 0 or self.lambda_con < 0 or self.margin < 0:
            msg = f"loss weights must be non-negative, got {self}"
            raise ValueError(msg)


@dataclass
class StylePair:
    """Style representations of two images at one tap, ready for matching.

    Attributes:
        tap: Tap name
        first: Representation of the clearer image (fog factor or Gram vector)
        second: Representation of the foggier image
        spatial_size: n_l of the tap's feature map
    """

    tap: str
    first: Tensor
    second: Tensor
    spatial_size: int

    @property
    def dim(self) -> int:
        return self.first.shape[0]


@dataclass
class ObjectiveTerms:
    """Addends of a slice objective; total is what gets differentiated."""

    seg_ce: Tensor
    fsm: Tensor
    con: Tensor
    total: Tensor


def seg_ce(probs: Tensor, labels: NDArray[np.integer]) -> Tensor:
    """Mean pixel-wise cross-entropy of (H, W, C) probabilities.

    Pixels labeled 255 are skipped.

    Raises:
        ShapeError: If labels do not match the prediction's spatial shape
        DomainValueError: If every pixel is ignored or a label is out of range
    """
    height, width, classes = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (height, width):
        msg = f"seg_ce: labels {labels.shape} do not match predictions {probs.shape}"
        raise ShapeError(msg)
    counted = labels != IGNORE_LABEL
    n = int(counted.sum())
    if n == 0:
        msg = "seg_ce: every pixel carries the ignore label"
        raise DomainValueError(msg)
    if np.any(labels[counted] >= classes):
        msg = f"seg_ce: labels exceed the {classes} predicted classes"
        raise DomainValueError(msg)

    one_hot = np.zeros((height, width, classes))
    rows, cols = np.nonzero(counted)
    one_hot[rows, cols, labels[counted].astype(np.intp)] = 1.0
    log_p = ops.log(ops.clamp_min(probs, PROB_FLOOR))
    return ops.scale(ops.sum(Tensor(one_hot) * log_p), -1.0 / n)


def _values(factor: FogFactor | Tensor) -> Tensor:
    return factor.values if isinstance(factor, FogFactor) else factor


def fsm_loss(f_a: FogFactor | Tensor, f_b: FogFactor | Tensor, d_l: int, n_l: int) -> Tensor:
    """Fog style matching: sum((f_a - f_b)^2) / (4 d_l^2 n_l^2).

    Raises:
        ShapeError: If the factors differ in length or do not have length d_l
    """
    a, b = _values(f_a), _values(f_b)
    if a.shape != b.shape or a.shape != (d_l,):
        msg = f"fsm_loss: factors {a.shape} and {b.shape} do not match d_l={d_l}"
        raise ShapeError(msg)
    return ops.scale(ops.sum(ops.square(a - b)), 1.0 / (4.0 * d_l**2 * n_l**2))


def consistency_loss(p_cw: Tensor, p_sf: Tensor) -> Tensor:
    """Sum over pixels of KL(P_cw || P_sf), with probabilities floored inside the logs.

    Raises:
        ShapeError: If the two predictions differ in shape
    """
    if p_cw.shape != p_sf.shape:
        msg = f"consistency_loss: shapes {p_cw.shape} and {p_sf.shape} differ"
        raise ShapeError(msg)
    log_ratio = ops.log(ops.clamp_min(p_cw, PROB_FLOOR)) - ops.log(ops.clamp_min(p_sf, PROB_FLOOR))
    return ops.sum(p_cw * log_ratio)


def style_matching(style_pairs: Sequence[StylePair]) -> Tensor:
    """Sum of fsm_loss over the taps of one image pair."""
    total = Tensor(0.0)
    for pair in style_pairs:
        total = total + fsm_loss(pair.first, pair.second, pair.dim, pair.spatial_size)
    return total


def objective_cw_sf(
    forward_cw: ForwardResult,
    forward_sf: ForwardResult | None,
    labels: NDArray[np.integer],
    style_pairs: Sequence[StylePair],
    weights: LossWeights,
) -> ObjectiveTerms:
    """Objective of a CW image and its SF counterpart.

    seg_ce(P_cw, Y) + seg_ce(P_sf, Y) + lambda_fsm * fsm + lambda_con * KL(P_cw || P_sf)

    Raises:
        ValueError: If the SF counterpart is missing
    """
    if forward_sf is None:
        msg = "objective_cw_sf needs the SF counterpart of the CW image"
        raise ValueError(msg)
    ce = seg_ce(forward_cw.probs, labels) + seg_ce(forward_sf.probs, labels)
    fsm = style_matching(style_pairs)
    con = consistency_loss(forward_cw.probs, forward_sf.probs)
    total = ce + weights.lambda_fsm * fsm + weights.lambda_con * con
    return ObjectiveTerms(seg_ce=ce, fsm=fsm, con=con, total=total)


def objective_d_rf(
    forward_d: ForwardResult,
    labels_d: NDArray[np.integer],
    style_pairs: Sequence[StylePair],
    weights: LossWeights,
    domain_d: Domain,
    rf_labels: NDArray[np.integer] | None = None,
) -> ObjectiveTerms:
    """Objective of a labeled CW or SF image paired with an unlabeled RF image.

    seg_ce(P_d, Y_d) + lambda_fsm * fsm; the RF image contributes fog factors only.

    Raises:
        LabelAccessError: If labels are supplied for the RF member
        ValueError: If domain_d is not CW or SF
    """
    if rf_labels is not None:
        msg = "RF labels must not enter the training objective"
        raise LabelAccessError(msg)
    if domain_d is Domain.RF:
        msg = "the labeled member of a D-RF pair must be CW or SF"
        raise ValueError(msg)
    ce = seg_ce(forward_d.probs, labels_d)
    fsm = style_matching(style_pairs)
    total = ce + weights.lambda_fsm * fsm
    return ObjectiveTerms(seg_ce=ce, fsm=fsm, con=Tensor(0.0), total=total)
