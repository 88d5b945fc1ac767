"""Gram-matrix style vectors, fog-pass filters and their contrastive losses.

A fog-pass filter maps the upper-triangular Gram vector of a tap's feature
map to a fog factor. Filters are trained so that factors of the same fog
domain are close in cosine distance and factors of different domains are at
least a margin apart. Content-pass filters share the architecture and loss
form but treat a CW image and its SF counterpart as the only positive pairs.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from fifo_desk.errors import DatasetIOError, DomainValueError, ShapeError
from fifo_desk.fifo_types import Domain
from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.tensor import Tensor
from fifo_desk.tensorcore.tensorio import load_tensor, save_tensor

logger = logging.getLogger(__name__)

FILTER_SLOPE = 0.01
SYMMETRY_TOLERANCE = 1e-9
PARAM_NAMES = ("w1", "b1", "w2", "b2")


def gram(feature_map: Tensor) -> Tensor:
    """Channel correlation matrix G[i, j] = <a_i, a_j> of a (c, h, w) map."""
    if len(feature_map.shape) != 3:
        msg = f"gram: expected a (c, h, w) feature map, got {feature_map.shape}"
        raise ShapeError(msg)
    c, h, w = feature_map.shape
    flat = ops.reshape(feature_map, (c, h * w))
    return ops.matmul(flat, ops.transpose(flat))


def gram_vector_length(channels: int) -> int:
    return channels * (channels + 1) // 2


@dataclass
class GramVector:
    """Upper-triangular part of a Gram matrix.

    Attributes:
        values: Length c(c+1)/2 tensor
        source_tap: Tap the feature map came from
        channels: c
        spatial_size: n_l of the feature map
    """

    values: Tensor
    source_tap: str
    channels: int
    spatial_size: int


def upper_tri_vec(g: Tensor, source_tap: str = "", spatial_size: int = 1) -> GramVector:
    """Row-major entries of g with column >= row.

    Raises:
        ShapeError: If g is not square
        DomainValueError: If g is asymmetric beyond 1e-9 (relative to its largest entry)
    """
    if len(g.shape) != 2 or g.shape[0] != g.shape[1]:
        msg = f"upper_tri_vec: expected a square matrix, got {g.shape}"
        raise ShapeError(msg)
    c = g.shape[0]
    tolerance = SYMMETRY_TOLERANCE * max(1.0, float(np.abs(g.data).max(initial=0.0)))
    asymmetry = float(np.abs(g.data - g.data.T).max(initial=0.0))
    if asymmetry > tolerance:
        msg = f"upper_tri_vec: matrix is not symmetric (max |G - G^T| = {asymmetry:.3g})"
        raise DomainValueError(msg)
    rows, cols = np.triu_indices(c)
    return GramVector(ops.take(g, rows * c + cols), source_tap, c, spatial_size)


def gram_vector(feature_map: Tensor, source_tap: str = "") -> GramVector:
    """Gram vector of a feature map, with G divided by the spatial size n_l."""
    _, h, w = feature_map.shape
    n = h * w
    return upper_tri_vec(ops.scale(gram(feature_map), 1.0 / n), source_tap, n)


@dataclass
class FogFactor:
    """Filter output for one image at one tap.

    Attributes:
        values: Length-dim tensor
        domain: Fog domain of the source image
        tap: Tap name
        pair_id: Scene pair id, needed by the content loss
    """

    values: Tensor
    domain: Domain
    tap: str
    pair_id: int | None = None


class FogPassFilter:
    """Two-layer perceptron input -> 2*dim -> dim with a leaky rectifier between."""

    def __init__(self, tap: str, params: dict[str, Tensor]) -> None:
        self.tap = tap
        self.params = params
        self.input_dim = params["w1"].shape[0]
        self.dim = params["w2"].shape[1]

    @classmethod
    def build(cls, seed: int, tap: str, input_dim: int, dim: int = 64) -> FogPassFilter:
        """Initialize a filter with fan-in scaled normal weights and zero biases."""
        if input_dim < 1 or dim < 1:
            msg = f"filter dimensions must be positive, got input {input_dim}, dim {dim}"
            raise ShapeError(msg)
        rng = np.random.default_rng(seed)
        hidden = 2 * dim
        params = {
            "w1": rng.standard_normal((input_dim, hidden)) * np.sqrt(2.0 / input_dim),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, dim)) * np.sqrt(2.0 / hidden),
            "b2": np.zeros(dim),
        }
        tensors = {
            k: Tensor(v, requires_grad=True, name=f"fogpass.{tap}.{k}") for k, v in params.items()
        }
        return cls(tap, tensors)

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in PARAM_NAMES]

    def __call__(self, inputs: Tensor) -> Tensor:
        """Apply the filter to one vector (n,) or a stack of vectors (N, n)."""
        single = len(inputs.shape) == 1
        x = ops.reshape(inputs, (1, inputs.shape[0])) if single else inputs
        if len(x.shape) != 2 or x.shape[1] != self.input_dim:
            msg = f"filter {self.tap}: expected input width {self.input_dim}, got {inputs.shape}"
            raise ShapeError(msg)
        hidden = ops.leaky_relu(ops.matmul(x, self.params["w1"]) + self.params["b1"], FILTER_SLOPE)
        out = ops.matmul(hidden, self.params["w2"]) + self.params["b2"]
        return ops.reshape(out, (self.dim,)) if single else out

    def save(self, directory: Path) -> None:
        for name in PARAM_NAMES:
            save_tensor(directory / f"{name}.fgten", self.params[name])

    @classmethod
    def load(cls, directory: Path, tap: str) -> FogPassFilter:
        params = {
            name: Tensor(load_tensor(directory / f"{name}.fgten"), requires_grad=True)
            for name in PARAM_NAMES
        }
        w1, b1, w2, b2 = (params[name].shape for name in PARAM_NAMES)
        if w1[1] != b1[0] or w2[1] != b2[0] or w1[1] != w2[0]:
            msg = f"inconsistent filter parameters in {directory}"
            raise DatasetIOError(msg)
        return cls(tap, params)


def fog_factor(
    fog_filter: FogPassFilter, u: GramVector, domain: Domain, pair_id: int | None = None
) -> FogFactor:
    """f = F(u); differentiable with respect to both the filter and u.

    Raises:
        ShapeError: If u does not match the filter input size
    """
    return FogFactor(fog_filter(u.values), domain, fog_filter.tap, pair_id)


def save_filters(directory: Path, filters: dict[str, FogPassFilter]) -> None:
    """Write filters to <directory>/<tap>/."""
    for tap, f in filters.items():
        f.save(directory / tap)


def load_filters(directory: Path) -> dict[str, FogPassFilter]:
    """Read every filter stored under <directory>/<tap>/.

    Raises:
        DatasetIOError: If the directory does not exist
    """
    if not directory.is_dir():
        msg = f"no fog-pass filters found in {directory}"
        raise DatasetIOError(msg)
    return {
        sub.name: FogPassFilter.load(sub, sub.name)
        for sub in sorted(directory.iterdir())
        if sub.is_dir()
    }


def _pairwise_hinge_loss(
    factors: Sequence[FogFactor], margin: float, positive: NDArray[np.bool_]
) -> Tensor:
    """Sum over unordered pairs of the squared margin hinge on cosine distance.

    Positive pairs pay [d - m]_+^2, negative pairs pay [m - d]_+^2.
    """
    if not 0.0 < margin < 2.0:
        msg = f"margin must lie in (0, 2), got {margin}"
        raise ValueError(msg)
    n = len(factors)
    if n < 2:
        return Tensor(0.0)
    dim = factors[0].values.shape[0]
    if any(f.values.shape != (dim,) for f in factors):
        msg = f"fog factors have mismatched shapes {[f.values.shape for f in factors]}"
        raise ShapeError(msg)
    for f in factors:
        if not np.any(f.values.data):
            msg = f"zero-norm fog factor at tap {f.tap} (cosine distance undefined)"
            raise DomainValueError(msg)

    stacked = ops.concat([ops.reshape(f.values, (1, dim)) for f in factors], axis=0)
    unit = stacked / ops.l2_norm(stacked, axis=1, keepdims=True)
    cosine = ops.matmul(unit, ops.transpose(unit))
    rows, cols = np.triu_indices(n, k=1)
    distance = 1.0 - ops.take(cosine, rows * n + cols)

    same = Tensor(positive[rows, cols].astype(np.float64))
    pull = ops.square(ops.clamp_min(distance - margin, 0.0))
    push = ops.square(ops.clamp_min(margin - distance, 0.0))
    return ops.sum(same * pull + (1.0 - same) * push)


def filter_loss(factors: Sequence[FogFactor], margin: float) -> Tensor:
    """Contrastive loss of fog-pass filters: positives share a fog domain.

    Raises:
        DomainValueError: If a factor has zero norm
    """
    domains = np.array([f.domain.value for f in factors])
    return _pairwise_hinge_loss(factors, margin, domains[:, None] == domains[None, :])


def content_filter_loss(factors: Sequence[FogFactor], margin: float) -> Tensor:
    """Contrastive loss of content-pass filters.

    Positives are exactly the CW-SF pairs that share a pair_id.

    Raises:
        DomainValueError: If a factor has zero norm
        ValueError: If a factor carries no pair_id
    """
    if any(f.pair_id is None for f in factors):
        msg = "content_filter_loss needs a pair_id on every factor"
        raise ValueError(msg)
    n = len(factors)
    positive = np.zeros((n, n), dtype=bool)
    for i, a in enumerate(factors):
        for j, b in enumerate(factors):
            counterparts = {a.domain, b.domain} == {Domain.CW, Domain.SF}
            positive[i, j] = counterparts and a.pair_id == b.pair_id
    return _pairwise_hinge_loss(factors, margin, positive)
