"""Evaluation and fog-style analysis of trained checkpoints.

evaluate() scores a network on one dataset split. analyze_run() measures
the fog-style structure of one network on the evaluation split: domain
gaps between fog-factor sets, how well k-means recovers the fog domains,
how independent fog factors are from scene content, and mIoU per domain.
analyze_pair() runs it for a checkpoint and a baseline with the same
frozen fog-pass filters and adds the differences.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from fifo_desk.config import RunConfig
from fifo_desk.errors import DatasetIOError, ShapeError
from fifo_desk.fifo_types import ALL_DOMAIN_PAIRS, Domain, FogParams, Split
from fifo_desk.fogpass import FogPassFilter, gram_vector, load_filters
from fifo_desk.metrics import (
    MIoUResult,
    avg_hausdorff,
    clustering_indices,
    independence_score,
    kmeans,
    l2_normalize,
    miou,
)
from fifo_desk.scenegen import FogDataset, apply_homogeneous_fog, to_uint8
from fifo_desk.seeding import derive_seed
from fifo_desk.segnet import SegNetwork
from fifo_desk.tensorcore.tensor import Tensor
from fifo_desk.tensorcore.tensorio import save_tensor
from fifo_desk.trainer import FOGPASS_DIR, train_content_filter

logger = logging.getLogger(__name__)

ANALYSIS_CSV = "analysis.csv"
ANALYSIS_COLUMNS = ("run_id", "metric", "domain_pair_or_class", "value")
EVAL_COLUMNS = ("split", "domain", "class", "iou")
DOMAIN_ORDER = (Domain.CW, Domain.SF, Domain.RF)
CLUSTER_K = 3
ALL_DOMAINS_KEY = "CW-SF-RF"
RUN_CHECKPOINT = "checkpoint"
RUN_BASELINE = "baseline"
RUN_DELTA = "delta"


@dataclass
class LabeledImage:
    domain: Domain
    image: NDArray[np.float64]
    labels: NDArray[np.uint8]
    pair_id: int


@dataclass
class ReportRow:
    run_id: str
    metric: str
    key: str
    value: float


@dataclass
class EvalResult:
    split: Split
    domain: Domain
    result: MIoUResult


def load_split(
    dataset: FogDataset, split: Split, sf_params: FogParams | None = None
) -> list[LabeledImage]:
    """Labeled images of one split in CW, SF, RF order.

    When the split has no SF samples on disk and sf_params is given, SF
    counterparts are rendered from the CW images and their stored depth.

    Raises:
        DatasetIOError: If the split has no CW samples
    """
    cw_rows = dataset.select(split, Domain.CW)
    if not cw_rows:
        msg = f"dataset {dataset.root} has no {split.value} samples"
        raise DatasetIOError(msg)
    images: list[LabeledImage] = []
    for domain in DOMAIN_ORDER:
        rows = dataset.select(split, domain)
        for row in rows:
            images.append(
                LabeledImage(
                    domain, dataset.image(row), dataset.labels(row, training=False), row.pair_id
                )
            )
        if domain is Domain.SF and not rows and sf_params is not None:
            for row in cw_rows:
                scene = dataset.scene(row)
                foggy = to_uint8(apply_homogeneous_fog(scene, sf_params)) / 255.0
                images.append(LabeledImage(Domain.SF, foggy, scene.labels, row.pair_id))
    return images


def sf_params_for(dataset: FogDataset, config: RunConfig) -> FogParams:
    """Fog of the dataset's own SF samples, falling back to the configured beta."""
    beta = dataset.sf_beta()
    params = config.fog_params()
    return params if beta is None else FogParams(beta=beta, airlight=params.airlight)


def evaluate(
    net: SegNetwork, dataset: FogDataset, split: Split, config: RunConfig
) -> list[EvalResult]:
    """Per-class IoU and mIoU of every domain present in a split.

    Evaluation-split SF images are synthesized when none are stored.
    """
    images = load_split(
        dataset, split, sf_params_for(dataset, config) if split is Split.EVAL else None
    )
    results = []
    for domain in DOMAIN_ORDER:
        members = [m for m in images if m.domain is domain]
        if not members:
            continue
        preds = [net.predict(m.image) for m in members]
        result = miou(preds, [m.labels for m in members], net.num_classes)
        logger.info(
            "%s %s: mIoU %.4f over %d images", split.value, domain.value, result.mean, len(members)
        )
        results.append(EvalResult(split, domain, result))
    return results


def write_eval_csv(path: Path, results: Sequence[EvalResult]) -> None:
    """One row per class and one "mean" row per domain; absent classes are skipped."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for r in results:
            for c, iou in enumerate(r.result.per_class):
                if not np.isnan(iou):
                    writer.writerow([r.split.value, r.domain.value, str(c), repr(iou)])
            writer.writerow([r.split.value, r.domain.value, "mean", repr(r.result.mean)])


def format_eval_table(results: Sequence[EvalResult]) -> str:
    lines = []
    for r in results:
        per_class = " ".join(
            f"{c}:{'-' if np.isnan(v) else repr(v)}" for c, v in enumerate(r.result.per_class)
        )
        lines.append(f"{r.split.value} {r.domain.value} mIoU {r.result.mean!r}  [{per_class}]")
    return "\n".join(lines)


@dataclass
class TapFeatures:
    """Per-image representations at one tap, in image order."""

    grams: list[NDArray[np.float64]] = field(default_factory=list)
    factors: list[NDArray[np.float64]] = field(default_factory=list)


def extract_features(
    net: SegNetwork, filters: dict[str, FogPassFilter], images: Sequence[LabeledImage]
) -> tuple[dict[str, TapFeatures], list[NDArray[np.uint8]]]:
    """Gram vectors and fog factors per tap, plus predictions.

    Raises:
        ShapeError: If a filter does not fit the network's tap
    """
    features = {tap: TapFeatures() for tap in filters}
    predictions: list[NDArray[np.uint8]] = []
    for member in images:
        result = net.forward(member.image)
        predictions.append(np.argmax(result.logits.data, axis=-1).astype(np.uint8))
        for tap, fog_filter in filters.items():
            fmap = result.taps[tap]
            u = gram_vector(fmap, tap).values
            features[tap].grams.append(u.data.copy())
            features[tap].factors.append(fog_filter(u).data.copy())
    return features, predictions


def _attach_taps(net: SegNetwork, filters: dict[str, FogPassFilter]) -> None:
    for tap, fog_filter in filters.items():
        channels = net.tap_channels(tap)
        if fog_filter.input_dim != channels * (channels + 1) // 2:
            msg = (
                f"filter {tap} expects input width {fog_filter.input_dim}, "
                f"network tap has {channels} channels"
            )
            raise ShapeError(msg)
    net.tap_layers = list(filters)


def _dump_factors(
    directory: Path, tap: str, factors: NDArray[np.float64], domains: list[Domain]
) -> None:
    for domain in DOMAIN_ORDER:
        mask = np.array([d is domain for d in domains])
        if mask.any():
            save_tensor(directory / tap / f"factors_{domain.value}.fgten", factors[mask])


def analyze_run(
    net: SegNetwork,
    filters: dict[str, FogPassFilter],
    dataset: FogDataset,
    config: RunConfig,
    run_id: str,
    dump_dir: Path | None = None,
) -> list[ReportRow]:
    """Fog-style analysis of one network on the evaluation split.

    Args:
        net: Network under analysis; its taps are set to the filters' taps
        filters: Frozen fog-pass filters, one per analyzed tap
        dataset: Dataset with train (content filter) and eval splits
        config: Run configuration (seeds, content filter and k-means knobs)
        run_id: Value of the run_id column
        dump_dir: When given, fog factors are written to
            <dump_dir>/<tap>/factors_<domain>.fgten

    Returns:
        Report rows in a fixed order

    Raises:
        DatasetIOError: If the evaluation split is missing
        ShapeError: If a filter does not fit the network
    """
    if not filters:
        msg = "analysis needs at least one fog-pass filter"
        raise DatasetIOError(msg)
    _attach_taps(net, filters)
    images = load_split(dataset, Split.EVAL, sf_params_for(dataset, config))
    domains = [m.domain for m in images]
    truth = np.array([DOMAIN_ORDER.index(d) for d in domains])
    features, predictions = extract_features(net, filters, images)
    logger.info("Run %s: extracted features of %d eval images", run_id, len(images))

    rows: list[ReportRow] = []
    for tap in filters:
        tap_features = features[tap]
        spaces = {
            "factor": np.stack(tap_features.factors),
            "gram": np.stack(tap_features.grams),
        }
        if dump_dir is not None:
            _dump_factors(dump_dir, tap, spaces["factor"], domains)

        for name, points in spaces.items():
            for pair in ALL_DOMAIN_PAIRS:
                a = points[np.array([d is pair.first for d in domains])]
                b = points[np.array([d is pair.second for d in domains])]
                if len(a) and len(b):
                    gap = avg_hausdorff(a, b, "cosine")
                    rows.append(ReportRow(run_id, f"avg_hausdorff_{name}_{tap}", str(pair), gap))

        for name, points in spaces.items():
            k = min(CLUSTER_K, len(points))
            assignments = kmeans(
                l2_normalize(points),
                k,
                derive_seed(config.master_seed, f"kmeans/{name}/{tap}"),
                config.kmeans_max_iters,
            )
            for index, value in clustering_indices(assignments, truth).items():
                rows.append(ReportRow(run_id, f"{index}_{name}_{tap}", ALL_DOMAINS_KEY, value))

        content_filter, _ = train_content_filter(config, net, dataset, tap)
        content = content_filter(Tensor(np.stack(tap_features.grams))).data
        for name, points in spaces.items():
            score = independence_score(points, content, config.independence_k)
            rows.append(ReportRow(run_id, f"independence_{name}_{tap}", ALL_DOMAINS_KEY, score))

    for domain in DOMAIN_ORDER:
        index = [i for i, m in enumerate(images) if m.domain is domain]
        if not index:
            continue
        result = miou(
            [predictions[i] for i in index], [images[i].labels for i in index], net.num_classes
        )
        for c, iou in enumerate(result.per_class):
            if not np.isnan(iou):
                rows.append(ReportRow(run_id, f"iou_{domain.value}", f"class_{c}", iou))
        rows.append(ReportRow(run_id, "miou", domain.value, result.mean))
    return rows


def delta_rows(current: Sequence[ReportRow], baseline: Sequence[ReportRow]) -> list[ReportRow]:
    """current - baseline for every (metric, key) present in both."""
    reference = {(r.metric, r.key): r.value for r in baseline}
    return [
        ReportRow(RUN_DELTA, r.metric, r.key, r.value - reference[(r.metric, r.key)])
        for r in current
        if (r.metric, r.key) in reference
    ]


def write_report(path: Path, rows: Sequence[ReportRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ANALYSIS_COLUMNS)
        for r in rows:
            writer.writerow([r.run_id, r.metric, r.key, repr(float(r.value))])


def read_report(path: Path) -> list[ReportRow]:
    with open(path, newline="") as f:
        return [
            ReportRow(r["run_id"], r["metric"], r["domain_pair_or_class"], float(r["value"]))
            for r in csv.DictReader(f)
        ]


def analyze_pair(
    checkpoint: Path,
    baseline: Path,
    dataset: FogDataset,
    config: RunConfig,
    out_dir: Path,
    filters_dir: Path | None = None,
) -> Path:
    """Analyze a checkpoint and a baseline with one set of frozen filters.

    Args:
        checkpoint: Trained checkpoint directory
        baseline: Baseline checkpoint directory (e.g. <run>/pretrained)
        dataset: Dataset holding the evaluation split
        config: Run configuration
        out_dir: Receives analysis.csv and the factor dumps
        filters_dir: Fog-pass filters to measure with; defaults to the
            checkpoint's own filters

    Returns:
        Path of analysis.csv

    Raises:
        DatasetIOError: If a checkpoint or the filters cannot be read
    """
    filters = load_filters(filters_dir or checkpoint / FOGPASS_DIR)
    runs = {RUN_CHECKPOINT: checkpoint, RUN_BASELINE: baseline}
    results: dict[str, list[ReportRow]] = {}
    for run_id, directory in runs.items():
        net = SegNetwork.load(directory, config.leaky_slope)
        logger.info("Analyzing %s (%s)", run_id, directory)
        results[run_id] = analyze_run(net, filters, dataset, config, run_id, out_dir / run_id)

    rows = [
        *results[RUN_CHECKPOINT],
        *results[RUN_BASELINE],
        *delta_rows(results[RUN_CHECKPOINT], results[RUN_BASELINE]),
    ]
    path = out_dir / ANALYSIS_CSV
    write_report(path, rows)
    logger.info("Wrote %d report rows to %s", len(rows), path)
    return path
