"""Core types shared across fifo-desk modules."""

from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray

from fifo_desk.errors import ConfigError


class Domain(StrEnum):
    """Fog domains of the three-domain dataset."""

    CW = "CW"  # clear weather
    SF = "SF"  # synthetic fog, paired with CW
    RF = "RF"  # real-fog proxy, unlabeled in training


class Split(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


class FsmDirection(StrEnum):
    """Which member of a style-matching pair receives gradients."""

    BIDIRECTIONAL = "bidirectional"
    FOG_TO_CLEAR = "fog_to_clear"  # clearer member detached
    CLEAR_TO_FOG = "clear_to_fog"  # foggier member detached


class FsmRepresentation(StrEnum):
    """Style representation that the matching loss compares."""

    FOG_FACTOR = "fog_factor"
    GRAM = "gram"


class Phase(StrEnum):
    PRETRAIN = "pretrain"
    WARMUP = "warmup"
    FIFO = "fifo"


# Foggier domains come later; used to decide which member is "clearer".
FOG_ORDER: dict[Domain, int] = {Domain.CW: 0, Domain.SF: 1, Domain.RF: 2}


@dataclass(frozen=True)
class DomainPair:
    """Unordered pair of distinct domains, written clearer-first ("CW-SF")."""

    first: Domain
    second: Domain

    @classmethod
    def parse(cls, text: str) -> DomainPair:
        parts = [p.strip().upper() for p in text.split("-")]
        if len(parts) != 2:
            msg = f"Invalid domain pair: {text!r} (expected e.g. 'CW-SF')"
            raise ConfigError(msg)
        try:
            a, b = Domain(parts[0]), Domain(parts[1])
        except ValueError as e:
            msg = f"Invalid domain pair: {text!r}"
            raise ConfigError(msg) from e
        if a == b:
            msg = f"Domain pair needs two different domains: {text!r}"
            raise ConfigError(msg)
        if FOG_ORDER[a] > FOG_ORDER[b]:
            a, b = b, a
        return cls(a, b)

    def __str__(self) -> str:
        return f"{self.first.value}-{self.second.value}"


ALL_DOMAIN_PAIRS: tuple[DomainPair, ...] = (
    DomainPair(Domain.CW, Domain.SF),
    DomainPair(Domain.CW, Domain.RF),
    DomainPair(Domain.SF, Domain.RF),
)


@dataclass(frozen=True)
class FogParams:
    """Homogeneous fog parameters.

    Attributes:
        beta: Attenuation coefficient in 1/m
        airlight: RGB airlight color in [0, 1]
    """

    beta: float
    airlight: tuple[float, float, float] = (0.9, 0.9, 0.92)

    def __post_init__(self) -> None:
        if self.beta < 0:
            msg = f"beta must be non-negative, got {self.beta}"
            raise ConfigError(msg)
        if len(self.airlight) != 3 or any(not 0.0 <= a <= 1.0 for a in self.airlight):
            msg = f"airlight must be three values in [0, 1], got {self.airlight}"
            raise ConfigError(msg)


@dataclass
class Scene:
    """A labeled scene.

    Attributes:
        image: (H, W, 3) float64 in [0, 1]
        labels: (H, W) uint8 class ids
        depth: (H, W) float64 metres, positive
        seed: Generator seed the scene was drawn from
    """

    image: NDArray[np.float64]
    labels: NDArray[np.uint8]
    depth: NDArray[np.float64]
    seed: int


@dataclass
class DomainSample:
    """A scene placed in one fog domain.

    Attributes:
        scene: Scene content; image carries the domain's fog
        domain: Fog domain
        pair_id: Shared by a CW sample and its SF counterpart
        labels_visible: False for RF samples in a training context
        index: Position within its split and domain
        split: Dataset split
        beta: Attenuation coefficient used to render the sample
    """

    scene: Scene
    domain: Domain
    pair_id: int
    labels_visible: bool = True
    index: int = 0
    split: Split = Split.TRAIN
    beta: float = 0.0
