"""Encoder-decoder segmentation network with named tap points.

Architecture (w = width_base, C = number of classes)::

    stem   conv3x3 3 -> w,  stride 1                      tap C1
    res1   residual w -> w,  stride 2, 1x1 projection     tap R1
    res2   residual w -> 2w, stride 2, 1x1 projection     tap R2
    res3   residual 2w -> 2w, identity shortcut           tap R3
    dec1   upsample(res3) ++ res1 -> conv3x3 3w -> w
    dec2   upsample(dec1) -> conv3x3 w -> w
    head   conv1x1 w -> C

Feature maps are channel-first inside the network. The input image and the
returned logits/probabilities are (H, W, channels).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from fifo_desk.errors import ConfigError, DatasetIOError, ShapeError
from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.tensor import Tensor
from fifo_desk.tensorcore.tensorio import load_tensor, save_tensor

logger = logging.getLogger(__name__)

TAP_NAMES = ("C1", "R1", "R2", "R3")
NETWORK_CSV = "network.csv"
NETWORK_COLUMNS = (
    "layer",
    "kind",
    "in_channels",
    "out_channels",
    "kernel",
    "stride",
    "group",
    "tap",
    "tap_active",
)


@dataclass(frozen=True)
class LayerSpec:
    """One convolution of the network.

    Attributes:
        name: Parameter prefix, e.g. "res1.conv1"
        kind: "conv" or "proj" (residual shortcut projection)
        in_channels: Input channels
        out_channels: Output channels
        kernel: Square kernel size
        stride: 1 or 2
        group: "encoder" or "decoder" (selects the learning rate)
        tap: Tap name emitted after this layer's block, or ""
    """

    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    group: str
    tap: str = ""

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def param_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel**2 + self.out_channels


def architecture(num_classes: int, width_base: int) -> list[LayerSpec]:
    """Layer specs of the network for the given class count and width."""
    w = width_base
    return [
        LayerSpec("stem", "conv", 3, w, 3, 1, "encoder", "C1"),
        LayerSpec("res1.conv1", "conv", w, w, 3, 2, "encoder"),
        LayerSpec("res1.conv2", "conv", w, w, 3, 1, "encoder", "R1"),
        LayerSpec("res1.proj", "proj", w, w, 1, 2, "encoder"),
        LayerSpec("res2.conv1", "conv", w, 2 * w, 3, 2, "encoder"),
        LayerSpec("res2.conv2", "conv", 2 * w, 2 * w, 3, 1, "encoder", "R2"),
        LayerSpec("res2.proj", "proj", w, 2 * w, 1, 2, "encoder"),
        LayerSpec("res3.conv1", "conv", 2 * w, 2 * w, 3, 1, "encoder"),
        LayerSpec("res3.conv2", "conv", 2 * w, 2 * w, 3, 1, "encoder", "R3"),
        LayerSpec("dec1", "conv", 3 * w, w, 3, 1, "decoder"),
        LayerSpec("dec2", "conv", w, w, 3, 1, "decoder"),
        LayerSpec("head", "conv", w, num_classes, 1, 1, "decoder"),
    ]


@dataclass
class ForwardResult:
    """Output of one forward pass.

    Attributes:
        logits: (H, W, C) class scores
        probs: (H, W, C) softmax of logits
        taps: Tap name -> (c_l, h_l, w_l) feature map, still attached to the tape
    """

    logits: Tensor
    probs: Tensor
    taps: dict[str, Tensor] = field(default_factory=dict)

    def spatial_size(self, tap: str) -> int:
        """n_l: number of spatial positions of a tap's feature map."""
        _, h, w = self.taps[tap].shape
        return h * w

    def channels(self, tap: str) -> int:
        return self.taps[tap].shape[0]


class SegNetwork:
    """Segmentation network owning its parameter tensors."""

    def __init__(
        self,
        specs: list[LayerSpec],
        params: dict[str, Tensor],
        tap_layers: list[str],
        leaky_slope: float = 0.01,
    ) -> None:
        unknown = [t for t in tap_layers if t not in TAP_NAMES]
        if unknown or not tap_layers:
            msg = f"tap_layers must be a non-empty subset of {list(TAP_NAMES)}, got {tap_layers}"
            raise ConfigError(msg)
        self.specs = specs
        self.params = params
        self.tap_layers = list(tap_layers)
        self.leaky_slope = leaky_slope
        self._by_name = {s.name: s for s in specs}

    @property
    def num_classes(self) -> int:
        return self._by_name["head"].out_channels

    @property
    def width_base(self) -> int:
        return self._by_name["stem"].out_channels

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def group_parameters(self, group: str) -> list[Tensor]:
        """Parameters of the "encoder" or "decoder" group."""
        names = {s.name for s in self.specs if s.group == group}
        return [p for key, p in self.params.items() if key.rsplit(".", 1)[0] in names]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def tap_channels(self, tap: str) -> int:
        """Channel count c_l of a tap's feature map."""
        spec = next(s for s in self.specs if s.tap == tap)
        return spec.out_channels

    def _conv(self, name: str, x: Tensor) -> Tensor:
        spec = self._by_name[name]
        return ops.conv2d(
            x,
            self.params[f"{name}.weight"],
            self.params[f"{name}.bias"],
            stride=spec.stride,
            padding=spec.padding,
        )

    def _act(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(x, self.leaky_slope)

    def _residual(self, block: str, x: Tensor) -> Tensor:
        main = self._conv(f"{block}.conv2", self._act(self._conv(f"{block}.conv1", x)))
        shortcut = self._conv(f"{block}.proj", x) if f"{block}.proj" in self._by_name else x
        return self._act(main + shortcut)

    def forward(self, image: Tensor | ArrayLike) -> ForwardResult:
        """Run the network on an (H, W, 3) image.

        Raises:
            ShapeError: If the image is not (H, W, 3) with H and W divisible by 4
        """
        x = ops.as_tensor(image)
        if len(x.shape) != 3 or x.shape[2] != 3 or x.shape[0] % 4 or x.shape[1] % 4:
            msg = f"forward: expected an (H, W, 3) image with H, W divisible by 4, got {x.shape}"
            raise ShapeError(msg)

        features = ops.transpose(x, (2, 0, 1))
        all_taps: dict[str, Tensor] = {}
        c1 = self._act(self._conv("stem", features))
        all_taps["C1"] = c1
        r1 = self._residual("res1", c1)
        all_taps["R1"] = r1
        r2 = self._residual("res2", r1)
        all_taps["R2"] = r2
        r3 = self._residual("res3", r2)
        all_taps["R3"] = r3

        d1 = self._act(self._conv("dec1", ops.concat([ops.upsample2x(r3), r1], axis=0)))
        d2 = self._act(self._conv("dec2", ops.upsample2x(d1)))
        logits = ops.transpose(self._conv("head", d2), (1, 2, 0))
        probs = ops.softmax(logits, axis=-1)
        return ForwardResult(
            logits=logits,
            probs=probs,
            taps={name: all_taps[name] for name in self.tap_layers},
        )

    __call__ = forward

    def predict(self, image: ArrayLike) -> np.ndarray:
        """Arg-max class map of an (H, W, 3) image."""
        return np.asarray(np.argmax(self.forward(image).logits.data, axis=-1), dtype=np.uint8)

    def save(self, directory: Path) -> None:
        """Write network.csv and one tensor file per parameter.

        Raises:
            DatasetIOError: If the directory cannot be written
        """
        try:
            directory.mkdir(parents=True, exist_ok=True)
            with open(directory / NETWORK_CSV, "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(NETWORK_COLUMNS)
                for s in self.specs:
                    active = int(bool(s.tap) and s.tap in self.tap_layers)
                    writer.writerow(
                        [
                            s.name,
                            s.kind,
                            s.in_channels,
                            s.out_channels,
                            s.kernel,
                            s.stride,
                            s.group,
                            s.tap,
                            active,
                        ]
                    )
        except OSError as e:
            msg = f"cannot write network checkpoint {directory}: {e}"
            raise DatasetIOError(msg) from e
        for name, tensor in self.params.items():
            save_tensor(directory / f"{name}.fgten", tensor)

    @classmethod
    def load(cls, directory: Path, leaky_slope: float = 0.01) -> SegNetwork:
        """Read a network written by save().

        Raises:
            DatasetIOError: If files are missing or malformed
        """
        try:
            with open(directory / NETWORK_CSV, newline="") as f:
                rows = list(csv.DictReader(f))
            specs = [
                LayerSpec(
                    name=r["layer"],
                    kind=r["kind"],
                    in_channels=int(r["in_channels"]),
                    out_channels=int(r["out_channels"]),
                    kernel=int(r["kernel"]),
                    stride=int(r["stride"]),
                    group=r["group"],
                    tap=r["tap"],
                )
                for r in rows
            ]
            taps = [r["tap"] for r in rows if r["tap"] and r["tap_active"] == "1"]
        except OSError as e:
            msg = f"cannot read network checkpoint {directory}: {e}"
            raise DatasetIOError(msg) from e
        except (KeyError, ValueError) as e:
            msg = f"malformed {NETWORK_CSV} in {directory}: {e}"
            raise DatasetIOError(msg) from e

        params: dict[str, Tensor] = {}
        for s in specs:
            for suffix in ("weight", "bias"):
                name = f"{s.name}.{suffix}"
                params[name] = Tensor(
                    load_tensor(directory / f"{name}.fgten"), requires_grad=True, name=name
                )
            expected = (s.out_channels, s.in_channels, s.kernel, s.kernel)
            if params[f"{s.name}.weight"].shape != expected:
                msg = f"{s.name}.weight in {directory} has shape {params[f'{s.name}.weight'].shape}"
                raise DatasetIOError(msg)
        logger.debug("Loaded network from %s (%d layers)", directory, len(specs))
        return cls(specs, params, taps, leaky_slope)


def build_network(
    seed: int,
    num_classes: int,
    width_base: int,
    tap_layers: list[str] | None = None,
    leaky_slope: float = 0.01,
) -> SegNetwork:
    """Create a network with He-initialized weights and zero biases.

    Args:
        seed: Seed of the initialization generator
        num_classes: Number of output classes (at least 2)
        width_base: Channel width w, in [8, 64]
        tap_layers: Active taps; defaults to ["C1", "R1"]
        leaky_slope: Negative slope of the leaky rectifiers

    Returns:
        Freshly initialized network

    Raises:
        ConfigError: On an invalid width or class count
    """
    if not 8 <= width_base <= 64:
        msg = f"width_base must lie in [8, 64], got {width_base}"
        raise ConfigError(msg)
    if num_classes < 2:
        msg = f"num_classes must be at least 2, got {num_classes}"
        raise ConfigError(msg)

    rng = np.random.default_rng(seed)
    specs = architecture(num_classes, width_base)
    params: dict[str, Tensor] = {}
    for s in specs:
        fan_in = s.in_channels * s.kernel * s.kernel
        weight = rng.standard_normal((s.out_channels, s.in_channels, s.kernel, s.kernel))
        params[f"{s.name}.weight"] = Tensor(
            weight * np.sqrt(2.0 / fan_in), requires_grad=True, name=f"{s.name}.weight"
        )
        params[f"{s.name}.bias"] = Tensor(
            np.zeros(s.out_channels), requires_grad=True, name=f"{s.name}.bias"
        )
    net = SegNetwork(specs, params, list(tap_layers or ["C1", "R1"]), leaky_slope)
    logger.debug(
        "Built network: width %d, %d classes, %d parameters",
        width_base,
        num_classes,
        net.param_count(),
    )
    return net
