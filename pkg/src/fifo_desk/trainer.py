"""Alternating optimization of fog-pass filters and the segmentation network.

Training runs in three phases:

1. pretrain: supervised CW-only training of the segmentation network
2. warmup: fog-pass filters alone, network frozen
3. fifo: per iteration a filter step (network frozen) followed by a
   segmentation step on a freshly sampled mini-batch (filters frozen)

Phases 2 and 3 share the iteration counter 0..total_iters-1. Every
iteration appends one row to train_log.csv.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
from numpy.typing import NDArray

from fifo_desk.config import RunConfig, save_config
from fifo_desk.errors import ConfigError, DomainValueError, TrainingAborted
from fifo_desk.fifo_types import (
    Domain,
    DomainPair,
    FsmDirection,
    FsmRepresentation,
    Phase,
    Scene,
    Split,
)
from fifo_desk.fogpass import (
    FogFactor,
    FogPassFilter,
    content_filter_loss,
    filter_loss,
    gram_vector,
    gram_vector_length,
    load_filters,
    save_filters,
)
from fifo_desk.losses import (
    LossWeights,
    ObjectiveTerms,
    StylePair,
    objective_cw_sf,
    objective_d_rf,
    seg_ce,
)
from fifo_desk.optim import Optimizer, ParamGroup, get_optimizer
from fifo_desk.scenegen import FogDataset, ManifestRow, apply_homogeneous_fog
from fifo_desk.seeding import derive_seed
from fifo_desk.segnet import ForwardResult, SegNetwork, build_network
from fifo_desk.tensorcore import ops
from fifo_desk.tensorcore.tensor import Tape, Tensor, frozen

logger = logging.getLogger(__name__)

TRAIN_LOG = "train_log.csv"
FOGPASS_DIR = "fogpass"
CONFIG_SNAPSHOT = "config.yaml"

Image = NDArray[np.float64]
Labels = NDArray[np.uint8]


def poly_decay(lr0: float, iteration: int, total: int, power: float) -> float:
    """lr0 * (1 - iteration / total) ** power.

    Raises:
        ValueError: If total is 0 or iteration lies outside [0, total]
    """
    if total <= 0:
        msg = f"poly_decay: total must be positive, got {total}"
        raise ValueError(msg)
    if not 0 <= iteration <= total:
        msg = f"poly_decay: iteration {iteration} outside [0, {total}]"
        raise ValueError(msg)
    return float(lr0 * (1.0 - iteration / total) ** power)


@dataclass
class MiniBatch:
    """Per-domain samples of one iteration.

    sf[i] is the counterpart of cw[i]; the three domain-pair slices pair
    entries by position. cw_flips[i] applies to both cw[i] and sf[i].
    """

    cw: list[ManifestRow]
    sf: list[ManifestRow]
    rf: list[ManifestRow]
    cw_flips: list[bool] = field(default_factory=list)
    rf_flips: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cw)

    def pairs(self, pair: DomainPair) -> list[tuple[ManifestRow, ManifestRow]]:
        members = {Domain.CW: self.cw, Domain.SF: self.sf, Domain.RF: self.rf}
        return list(zip(members[pair.first], members[pair.second], strict=True))


def sample_minibatch(
    dataset: FogDataset, rng: np.random.Generator, batch_size: int, hflip: bool = True
) -> MiniBatch:
    """Draw CW and RF training samples uniformly without replacement.

    Raises:
        ConfigError: If a training split holds fewer samples than batch_size
    """
    cw_rows = dataset.select(Split.TRAIN, Domain.CW)
    rf_rows = dataset.select(Split.TRAIN, Domain.RF)
    sf_by_pair = {r.pair_id: r for r in dataset.select(Split.TRAIN, Domain.SF)}
    for name, rows in (("CW", cw_rows), ("RF", rf_rows)):
        if len(rows) < batch_size:
            msg = f"training {name} split has {len(rows)} samples, fewer than batch {batch_size}"
            raise ConfigError(msg)

    cw = [cw_rows[i] for i in rng.choice(len(cw_rows), size=batch_size, replace=False)]
    rf = [rf_rows[i] for i in rng.choice(len(rf_rows), size=batch_size, replace=False)]
    try:
        sf = [sf_by_pair[r.pair_id] for r in cw]
    except KeyError as e:
        msg = f"training CW sample with pair_id {e} has no SF counterpart"
        raise ConfigError(msg) from e
    if hflip:
        cw_flips = [bool(f) for f in rng.random(batch_size) < 0.5]
        rf_flips = [bool(f) for f in rng.random(batch_size) < 0.5]
    else:
        cw_flips = [False] * batch_size
        rf_flips = [False] * batch_size
    return MiniBatch(cw, sf, rf, cw_flips, rf_flips)


@dataclass
class SegStepResult:
    seg_ce: float
    fsm: float
    con: float
    total: float


@dataclass
class TrainResult:
    """Paths produced by a training run."""

    out_dir: Path
    final: Path
    checkpoints: list[Path]
    log_path: Path


def save_checkpoint(
    directory: Path, net: SegNetwork, filters: dict[str, FogPassFilter], config: RunConfig
) -> Path:
    """Write network, fog-pass filters and a config snapshot to one directory."""
    net.save(directory)
    save_filters(directory / FOGPASS_DIR, filters)
    save_config(config, directory / CONFIG_SNAPSHOT)
    logger.info("Wrote checkpoint %s", directory)
    return directory


def load_checkpoint(
    directory: Path, leaky_slope: float = 0.01
) -> tuple[SegNetwork, dict[str, FogPassFilter]]:
    """Read a checkpoint; filters are empty when none were stored."""
    net = SegNetwork.load(directory, leaky_slope)
    fogpass = directory / FOGPASS_DIR
    filters = load_filters(fogpass) if fogpass.is_dir() else {}
    return net, filters


def make_optimizer(config: RunConfig, name: str, groups: list[ParamGroup]) -> Optimizer:
    """Create a registry optimizer with the constants configured for it."""
    hyper: dict[str, dict[str, float]] = {
        "SGD": {"momentum": config.momentum},
        "Adamax": {
            "beta1": config.adamax_beta1,
            "beta2": config.adamax_beta2,
            "eps": config.adamax_eps,
        },
    }
    return get_optimizer(name, groups, **hyper.get(name, {}))


def _flip(array: NDArray[np.generic], flip: bool) -> NDArray[np.generic]:
    return np.ascontiguousarray(array[:, ::-1]) if flip else array


class Trainer:
    """State of one training run: network, filters, optimizers and the log."""

    def __init__(
        self,
        config: RunConfig,
        dataset: FogDataset,
        net: SegNetwork | None = None,
        filters: dict[str, FogPassFilter] | None = None,
    ) -> None:
        self.config = config
        self.dataset = dataset
        self.weights = LossWeights(config.lambda_fsm, config.lambda_con, config.margin)
        self.net = net or build_network(
            derive_seed(config.master_seed, "segnet"),
            config.num_classes,
            config.width_base,
            config.tap_layers,
            config.leaky_slope,
        )
        self.net.tap_layers = list(config.tap_layers)
        self.filters = self._complete_filters(filters or {})
        self.filter_optimizers = {
            tap: make_optimizer(
                config,
                config.filter_optimizer,
                [ParamGroup(tap, f.parameters(), config.filter_lr_for(tap))],
            )
            for tap, f in self.filters.items()
        }
        self.seg_optimizer = self.new_seg_optimizer()
        self._sf_override = self._check_sf_beta()

    def _complete_filters(self, filters: dict[str, FogPassFilter]) -> dict[str, FogPassFilter]:
        complete: dict[str, FogPassFilter] = {}
        for tap in self.config.tap_layers:
            input_dim = gram_vector_length(self.net.tap_channels(tap))
            existing = filters.get(tap)
            if existing is not None and existing.input_dim == input_dim:
                complete[tap] = existing
                continue
            complete[tap] = FogPassFilter.build(
                derive_seed(self.config.master_seed, f"fogpass/{tap}"),
                tap,
                input_dim,
                self.config.factor_dim,
            )
        return complete

    def new_seg_optimizer(self) -> Optimizer:
        cfg = self.config
        groups = [
            ParamGroup("encoder", self.net.group_parameters("encoder"), cfg.lr_encoder),
            ParamGroup("decoder", self.net.group_parameters("decoder"), cfg.lr_decoder),
        ]
        return make_optimizer(cfg, cfg.seg_optimizer, groups)

    def _check_sf_beta(self) -> bool:
        disk_beta = self.dataset.sf_beta()
        if disk_beta is None or math.isclose(disk_beta, self.config.beta, rel_tol=1e-12):
            return False
        logger.warning(
            "Dataset SF beta %.6g differs from configured beta %.6g; "
            "re-synthesizing SF images from CW counterparts",
            disk_beta,
            self.config.beta,
        )
        return True

    def filter_parameters(self) -> list[Tensor]:
        return [p for f in self.filters.values() for p in f.parameters()]

    # Data

    def _image(self, row: ManifestRow, flip: bool, cw_row: ManifestRow | None = None) -> Image:
        if row.domain is Domain.SF and self._sf_override and cw_row is not None:
            depth = self.dataset.depth(cw_row)
            labels = np.zeros(depth.shape, dtype=np.uint8)
            scene = Scene(self.dataset.image(cw_row), labels, depth, cw_row.seed)
            return np.asarray(_flip(apply_homogeneous_fog(scene, self.config.fog_params()), flip))
        return np.asarray(_flip(self.dataset.image(row), flip))

    def _labels(self, row: ManifestRow, flip: bool) -> Labels:
        return np.asarray(_flip(self.dataset.labels(row, training=True), flip))

    def batch_rng(self, phase: Phase, kind: str, iteration: int) -> np.random.Generator:
        return np.random.default_rng(
            derive_seed(self.config.master_seed, f"batch/{phase.value}/{kind}", iteration)
        )

    def sample(self, phase: Phase, kind: str, iteration: int) -> MiniBatch:
        rng = self.batch_rng(phase, kind, iteration)
        return sample_minibatch(self.dataset, rng, self.config.batch_per_domain, self.config.hflip)

    def batch_images(self, batch: MiniBatch) -> dict[Domain, list[Image]]:
        return {
            Domain.CW: [self._image(r, f) for r, f in zip(batch.cw, batch.cw_flips, strict=True)],
            Domain.SF: [
                self._image(r, f, c)
                for r, f, c in zip(batch.sf, batch.cw_flips, batch.cw, strict=True)
            ],
            Domain.RF: [self._image(r, f) for r, f in zip(batch.rf, batch.rf_flips, strict=True)],
        }

    # Steps

    def filter_step(self, batch: MiniBatch) -> dict[str, float]:
        """Train every fog-pass filter for one step with the network frozen.

        Returns:
            Filter loss per tap

        Raises:
            DomainValueError: If a filter produces a zero-norm fog factor
        """
        images = self.batch_images(batch)
        with frozen(self.net.parameters()):
            gram_inputs: dict[str, list[tuple[Domain, Tensor]]] = {t: [] for t in self.filters}
            for domain, domain_images in images.items():
                for image in domain_images:
                    result = self.net.forward(image)
                    for tap in self.filters:
                        gram_inputs[tap].append((domain, gram_vector(result.taps[tap], tap).values))

        losses: dict[str, float] = {}
        for tap, fog_filter in self.filters.items():
            optimizer = self.filter_optimizers[tap]
            optimizer.zero_grad()
            with Tape() as tape:
                factors = [FogFactor(fog_filter(u), d, tap) for d, u in gram_inputs[tap]]
                loss = filter_loss(factors, self.config.margin)
            tape.backward(loss)
            optimizer.step()
            tape.clear()
            losses[tap] = loss.item()
        return losses

    def _style(self, result: ForwardResult, tap: str) -> Tensor:
        u = gram_vector(result.taps[tap], tap)
        if self.config.representation is FsmRepresentation.GRAM:
            return u.values
        return self.filters[tap](u.values)

    def _style_pairs(self, clearer: ForwardResult, foggier: ForwardResult) -> list[StylePair]:
        pairs = []
        direction = self.config.direction
        for tap in self.config.tap_layers:
            first, second = self._style(clearer, tap), self._style(foggier, tap)
            if direction is FsmDirection.FOG_TO_CLEAR:
                first = first.detach()
            elif direction is FsmDirection.CLEAR_TO_FOG:
                second = second.detach()
            pairs.append(StylePair(tap, first, second, clearer.spatial_size(tap)))
        return pairs

    def segmentation_objective(self, batch: MiniBatch) -> list[ObjectiveTerms]:
        """Evaluate the enabled domain-pair slices; must run under an active tape.

        Returns:
            One ObjectiveTerms per enabled slice, reduced over the slice's pairs
        """
        images = self.batch_images(batch)
        labels = [self._labels(r, f) for r, f in zip(batch.cw, batch.cw_flips, strict=True)]
        enabled = set(self.config.pairs)
        needed = {d for p in enabled for d in (p.first, p.second)}
        forwards = {d: [self.net.forward(img) for img in images[d]] for d in needed}

        slices: list[ObjectiveTerms] = []
        for pair in self.config.pairs:
            terms: list[ObjectiveTerms] = []
            for i in range(len(batch)):
                clearer, foggier = forwards[pair.first][i], forwards[pair.second][i]
                style = self._style_pairs(clearer, foggier)
                if pair.second is Domain.SF:
                    terms.append(objective_cw_sf(clearer, foggier, labels[i], style, self.weights))
                else:
                    # SF labels equal those of the CW counterpart.
                    terms.append(
                        objective_d_rf(clearer, labels[i], style, self.weights, pair.first)
                    )
            slices.append(self._reduce(terms))
        return slices

    def _reduce(self, terms: list[ObjectiveTerms]) -> ObjectiveTerms:
        factor = 1.0 / len(terms) if self.config.subbatch_reduction == "mean" else 1.0

        def combine(pick: Callable[[ObjectiveTerms], Tensor]) -> Tensor:
            total = pick(terms[0])
            for t in terms[1:]:
                total = total + pick(t)
            return ops.scale(total, factor)

        return ObjectiveTerms(
            seg_ce=combine(lambda t: t.seg_ce),
            fsm=combine(lambda t: t.fsm),
            con=combine(lambda t: t.con),
            total=combine(lambda t: t.total),
        )

    def seg_step(self, batch: MiniBatch, iteration: int) -> SegStepResult:
        """One SGD step of the segmentation network with the filters frozen.

        Args:
            batch: Mini-batch sampled for this step
            iteration: Main-loop iteration (warmup_iters <= iteration < total_iters)
        """
        cfg = self.config
        counter = iteration - cfg.warmup_iters
        span = cfg.total_iters - cfg.warmup_iters
        for group, lr0 in (("encoder", cfg.lr_encoder), ("decoder", cfg.lr_decoder)):
            self.seg_optimizer.set_lr(group, poly_decay(lr0, counter, span, cfg.poly_power))
        self.seg_optimizer.zero_grad()
        with frozen(self.filter_parameters()), Tape() as tape:
            slices = self.segmentation_objective(batch)
            total = slices[0].total
            for s in slices[1:]:
                total = total + s.total
        tape.backward(total)
        self.seg_optimizer.step()
        tape.clear()
        return SegStepResult(
            seg_ce=float(np.sum([s.seg_ce.item() for s in slices])),
            fsm=float(np.sum([s.fsm.item() for s in slices])),
            con=float(np.sum([s.con.item() for s in slices])),
            total=total.item(),
        )

    def pretrain_step(self, iteration: int, optimizer: Optimizer) -> float:
        """One supervised CW-only step with poly-decayed learning rates."""
        cfg = self.config
        for group, lr0 in (("encoder", cfg.lr_encoder), ("decoder", cfg.lr_decoder)):
            optimizer.set_lr(group, poly_decay(lr0, iteration, cfg.pretrain_iters, cfg.poly_power))
        batch = self.sample(Phase.PRETRAIN, "seg", iteration)
        optimizer.zero_grad()
        with Tape() as tape:
            losses = [
                seg_ce(self.net.forward(self._image(r, f)).probs, self._labels(r, f))
                for r, f in zip(batch.cw, batch.cw_flips, strict=True)
            ]
            total = losses[0]
            for loss in losses[1:]:
                total = total + loss
            loss = ops.scale(total, 1.0 / len(losses))
        tape.backward(loss)
        optimizer.step()
        tape.clear()
        return loss.item()


class _TrainLog:
    """CSV writer for train_log.csv, one row per iteration."""

    def __init__(self, path: Path, taps: list[str]) -> None:
        self.taps = taps
        self.columns = ["iter", "phase", *(f"filter_loss_{t}" for t in taps)]
        self.columns += ["seg_ce", "fsm", "con", "total", "lr_encoder", "lr_decoder"]
        self.path = path
        self._file: TextIO = open(path, "w", newline="")  # noqa: SIM115
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, iteration: int, phase: Phase, values: dict[str, float]) -> None:
        row = [str(iteration), phase.value]
        row += [repr(values[c]) if c in values else "" for c in self.columns[2:]]
        self._writer.writerow(row)
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def _check_finite(
    values: dict[str, float], iteration: int, phase: Phase, last: Path | None
) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        msg = f"non-finite loss ({', '.join(bad)}) at {phase.value} iteration {iteration}"
        raise TrainingAborted(msg, iteration, phase.value, str(last) if last else None)


def train(config: RunConfig, data_root: Path, out_dir: Path) -> TrainResult:
    """Run pretraining, filter warm-up and alternating training.

    Args:
        config: Validated run configuration
        data_root: Generated dataset
        out_dir: Destination of checkpoints and train_log.csv

    Returns:
        Paths of the written artefacts

    Raises:
        TrainingAborted: If a loss becomes non-finite
        DatasetIOError: If the dataset cannot be read or the output written
    """
    dataset = FogDataset(data_root)
    net: SegNetwork | None = None
    filters: dict[str, FogPassFilter] | None = None
    if config.init_checkpoint:
        net, filters = load_checkpoint(Path(config.init_checkpoint), config.leaky_slope)
        logger.info("Warm start from %s, skipping pretraining", config.init_checkpoint)
    trainer = Trainer(config, dataset, net, filters)

    out_dir.mkdir(parents=True, exist_ok=True)
    log = _TrainLog(out_dir / TRAIN_LOG, list(config.tap_layers))
    checkpoints: list[Path] = []
    last: Path | None = None
    phase = Phase.PRETRAIN
    try:
        if not config.init_checkpoint:
            logger.info("Phase %s: %d iterations", phase.value, config.pretrain_iters)
            optimizer = trainer.new_seg_optimizer()
            for it in range(config.pretrain_iters):
                lr_enc = optimizer.lr("encoder")
                loss = trainer.pretrain_step(it, optimizer)
                _check_finite({"seg_ce": loss}, it, phase, last)
                values = {
                    "seg_ce": loss,
                    "total": loss,
                    "lr_encoder": optimizer.lr("encoder"),
                    "lr_decoder": optimizer.lr("decoder"),
                }
                log.write(it, phase, values)
                if (it + 1) % config.log_every == 0:
                    logger.info(
                        "pretrain %d/%d seg_ce %.4f (lr %.3g)",
                        it + 1,
                        config.pretrain_iters,
                        loss,
                        lr_enc,
                    )
            last = save_checkpoint(out_dir / "pretrained", trainer.net, trainer.filters, config)
            checkpoints.append(last)

        for it in range(config.total_iters):
            phase = Phase.WARMUP if it < config.warmup_iters else Phase.FIFO
            if it == 0 or it == config.warmup_iters:
                logger.info("Phase %s from iteration %d", phase.value, it)
            if it == config.warmup_iters:
                last = save_checkpoint(out_dir / "warmup", trainer.net, trainer.filters, config)
                checkpoints.append(last)

            try:
                filter_losses = trainer.filter_step(trainer.sample(phase, "filter", it))
            except DomainValueError as e:
                msg = f"filter step failed at iteration {it}: {e}"
                raise TrainingAborted(msg, it, phase.value, str(last) if last else None) from e
            values = {f"filter_loss_{t}": v for t, v in filter_losses.items()}
            _check_finite(values, it, phase, last)

            if phase is Phase.FIFO:
                result = trainer.seg_step(trainer.sample(phase, "seg", it), it)
                seg_values = {
                    "seg_ce": result.seg_ce,
                    "fsm": result.fsm,
                    "con": result.con,
                    "total": result.total,
                }
                _check_finite(seg_values, it, phase, last)
                values |= seg_values
                values["lr_encoder"] = trainer.seg_optimizer.lr("encoder")
                values["lr_decoder"] = trainer.seg_optimizer.lr("decoder")
            log.write(it, phase, values)

            if (it + 1) % config.log_every == 0:
                logger.info("%s %d/%d %s", phase.value, it + 1, config.total_iters, _fmt(values))
            if (it + 1) % config.checkpoint_interval == 0 and it + 1 < config.total_iters:
                directory = out_dir / f"iter_{it + 1}"
                last = save_checkpoint(directory, trainer.net, trainer.filters, config)
                checkpoints.append(last)

        if config.warmup_iters == config.total_iters:
            last = save_checkpoint(out_dir / "warmup", trainer.net, trainer.filters, config)
            checkpoints.append(last)
        final = save_checkpoint(out_dir / "final", trainer.net, trainer.filters, config)
        checkpoints.append(final)
    finally:
        log.close()

    return TrainResult(out_dir=out_dir, final=final, checkpoints=checkpoints, log_path=log.path)


def _fmt(values: dict[str, float]) -> str:
    return " ".join(f"{k} {v:.4g}" for k, v in values.items())


def train_content_filter(
    config: RunConfig,
    net: SegNetwork,
    dataset: FogDataset,
    tap: str,
    iterations: int | None = None,
) -> tuple[FogPassFilter, list[float]]:
    """Train a content-pass filter on a frozen network.

    Inputs are the tap's Gram vectors, as for the fog-pass filter; positives
    are CW-SF counterparts.

    Args:
        config: Run configuration (batch size, margin, seeds, rates)
        net: Segmentation network; left unchanged
        dataset: Training dataset
        tap: Tap whose features are filtered
        iterations: Step count; defaults to config.content_filter_iters

    Returns:
        The trained filter and its per-step losses
    """
    previous_taps = list(net.tap_layers)
    trainer = Trainer(config, dataset, net, {})
    steps = config.content_filter_iters if iterations is None else iterations
    channels = net.tap_channels(tap)
    content = FogPassFilter.build(
        derive_seed(config.master_seed, f"contentpass/{tap}"),
        tap,
        gram_vector_length(channels),
        config.factor_dim,
    )
    optimizer = make_optimizer(
        config,
        config.filter_optimizer,
        [ParamGroup(tap, content.parameters(), config.content_filter_lr)],
    )
    trace: list[float] = []
    net.tap_layers = [tap]
    try:
        for it in range(steps):
            batch = trainer.sample(Phase.FIFO, f"content/{tap}", it)
            images = trainer.batch_images(batch)
            rows = {Domain.CW: batch.cw, Domain.SF: batch.sf, Domain.RF: batch.rf}
            inputs: list[tuple[Domain, int, Tensor]] = []
            with frozen(net.parameters()):
                for domain, domain_images in images.items():
                    for row, image in zip(rows[domain], domain_images, strict=True):
                        u = gram_vector(net.forward(image).taps[tap], tap).values
                        inputs.append((domain, row.pair_id, u))
            optimizer.zero_grad()
            with Tape() as tape:
                factors = [FogFactor(content(x), d, tap, pid) for d, pid, x in inputs]
                loss = content_filter_loss(factors, config.margin)
            tape.backward(loss)
            optimizer.step()
            tape.clear()
            trace.append(loss.item())
    finally:
        net.tap_layers = previous_taps
    if trace:
        logger.info("Content filter %s: loss %.4g -> %.4g", tap, trace[0], trace[-1])
    return content, trace
