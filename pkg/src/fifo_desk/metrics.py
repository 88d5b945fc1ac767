"""Evaluation metrics: mIoU, clustering agreement, domain gaps, independence.

All functions are pure and operate on numpy arrays.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.metrics import (
    adjusted_mutual_info_score,
    adjusted_rand_score,
    normalized_mutual_info_score,
)

from fifo_desk.errors import DomainValueError, ShapeError
from fifo_desk.fifo_types import Domain

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255


@dataclass
class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns are predictions."""

    num_classes: int
    counts: NDArray[np.int64] = field(init=False)

    def __post_init__(self) -> None:
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def add(
        self, prediction: ArrayLike, truth: ArrayLike, ignore_label: int = IGNORE_LABEL
    ) -> None:
        """Accumulate one prediction/ground-truth pair of equal shape."""
        pred = np.asarray(prediction).ravel().astype(np.int64)
        true = np.asarray(truth).ravel().astype(np.int64)
        if pred.shape != true.shape:
            msg = f"prediction {np.shape(prediction)} and truth {np.shape(truth)} differ in shape"
            raise ShapeError(msg)
        keep = true != ignore_label
        pred, true = pred[keep], true[keep]
        c = self.num_classes
        if np.any((true < 0) | (true >= c) | (pred < 0) | (pred >= c)):
            msg = f"class ids outside [0, {c})"
            raise DomainValueError(msg)
        self.counts += np.bincount(true * c + pred, minlength=c * c).reshape(c, c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> NDArray[np.float64]:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


@dataclass
class MIoUResult:
    per_class: list[float]
    mean: float


def miou(
    predictions: Sequence[ArrayLike],
    ground_truths: Sequence[ArrayLike],
    num_classes: int,
    ignore_label: int = IGNORE_LABEL,
) -> MIoUResult:
    """Mean intersection over union over the classes present.

    Raises:
        ShapeError: If the sequences or masks do not line up
        DomainValueError: If no class occurs in either predictions or truth
    """
    if len(predictions) != len(ground_truths):
        msg = f"{len(predictions)} predictions for {len(ground_truths)} ground truths"
        raise ShapeError(msg)
    cm = ConfusionMatrix(num_classes)
    for pred, truth in zip(predictions, ground_truths, strict=True):
        cm.add(pred, truth, ignore_label)
    per_class = cm.iou()
    if np.all(np.isnan(per_class)):
        msg = "miou: no valid class in predictions or ground truth"
        raise DomainValueError(msg)
    return MIoUResult([float(v) for v in per_class], float(np.nanmean(per_class)))


@dataclass
class FactorSet:
    """Points of equal dimension with the fog domain of each point."""

    points: NDArray[np.float64]
    domains: list[Domain]

    def __post_init__(self) -> None:
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[0] == 0:
            msg = "FactorSet must not be empty"
            raise DomainValueError(msg)
        if len(self.domains) != self.points.shape[0]:
            msg = f"{len(self.domains)} domain labels for {self.points.shape[0]} points"
            raise ShapeError(msg)

    def of(self, domain: Domain) -> NDArray[np.float64]:
        mask = np.array([d is domain for d in self.domains])
        return self.points[mask]


def l2_normalize(points: ArrayLike) -> NDArray[np.float64]:
    """Scale every row to unit length.

    Raises:
        DomainValueError: If a row is zero
    """
    x = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        msg = "cannot normalize a zero vector"
        raise DomainValueError(msg)
    return x / norms


def kmeans(points: ArrayLike, k: int, seed: int, max_iters: int = 300) -> NDArray[np.int64]:
    """Lloyd's k-means with seeded k-means++ initialization.

    Raises:
        DomainValueError: If points is empty
        ValueError: If k exceeds the number of points
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        msg = "kmeans: empty input"
        raise DomainValueError(msg)
    if not 1 <= k <= x.shape[0]:
        msg = f"kmeans: k={k} must lie in [1, {x.shape[0]}]"
        raise ValueError(msg)
    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=1,
        max_iter=max_iters,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed & 0xFFFFFFFF,
    )
    return np.asarray(model.fit_predict(x), dtype=np.int64)


def clustering_indices(assignments: ArrayLike, true_domains: ArrayLike) -> dict[str, float]:
    """ARI, NMI (arithmetic-mean normalization) and AMI of a clustering.

    Raises:
        ShapeError: If the label sequences differ in length
    """
    pred = np.asarray(assignments)
    true = np.asarray(true_domains)
    if pred.shape != true.shape:
        msg = f"clustering_indices: {pred.shape} assignments for {true.shape} labels"
        raise ShapeError(msg)
    return {
        "ARI": float(adjusted_rand_score(true, pred)),
        "NMI": float(normalized_mutual_info_score(true, pred, average_method="arithmetic")),
        "AMI": float(adjusted_mutual_info_score(true, pred, average_method="arithmetic")),
    }


def _distances(a: NDArray[np.float64], b: NDArray[np.float64], metric: str) -> NDArray[np.float64]:
    if metric == "cosine" and (
        np.any(np.linalg.norm(a, axis=1) == 0) or np.any(np.linalg.norm(b, axis=1) == 0)
    ):
        msg = "cosine distance is undefined for zero vectors"
        raise DomainValueError(msg)
    return np.maximum(cdist(a, b, metric=metric), 0.0)


def avg_hausdorff(a: ArrayLike, b: ArrayLike, metric: str = "cosine") -> float:
    """Symmetric average Hausdorff distance between two point sets.

    0.5 * (mean over a of the nearest distance into b + mean over b of the
    nearest distance into a).

    Raises:
        DomainValueError: If a set is empty or (cosine) holds a zero vector
        ShapeError: If the dimensions differ
        ValueError: If the metric is not "cosine" or "euclidean"
    """
    if metric not in ("cosine", "euclidean"):
        msg = f"avg_hausdorff: unsupported metric {metric!r}"
        raise ValueError(msg)
    x = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if x.size == 0 or y.size == 0:
        msg = "avg_hausdorff: empty point set"
        raise DomainValueError(msg)
    if x.shape[1] != y.shape[1]:
        msg = f"avg_hausdorff: dimensions {x.shape[1]} and {y.shape[1]} differ"
        raise ShapeError(msg)
    d = _distances(x, y, metric)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def _neighbors(points: NDArray[np.float64], k: int) -> NDArray[np.intp]:
    d = _distances(points, points, "cosine")
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def independence_score(fog_factors: ArrayLike, content_factors: ArrayLike, k: int = 200) -> float:
    """1 - mean overlap of cosine k-nearest-neighbor sets in the two spaces.

    k is clamped to N - 1; the anchor is excluded and ties go to the lower index.

    Raises:
        ShapeError: If the two sets have different counts
        DomainValueError: If fewer than two points are given or a vector is zero
    """
    fog = np.atleast_2d(np.asarray(fog_factors, dtype=np.float64))
    content = np.atleast_2d(np.asarray(content_factors, dtype=np.float64))
    n = fog.shape[0]
    if content.shape[0] != n:
        msg = f"independence_score: {n} fog factors for {content.shape[0]} content factors"
        raise ShapeError(msg)
    if n < 2:
        msg = "independence_score needs at least two points"
        raise DomainValueError(msg)
    k = min(k, n - 1)
    fog_nn = _neighbors(fog, k)
    content_nn = _neighbors(content, k)
    overlap = [
        len(set(fog_nn[i].tolist()) & set(content_nn[i].tolist())) / k for i in range(n)
    ]
    return float(1.0 - np.mean(overlap))
