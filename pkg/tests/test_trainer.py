"""Tests for the trainer module."""

import csv
import logging
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from fifo_desk.errors import ConfigError, TrainingAborted
from fifo_desk.fifo_types import Domain, Phase
from fifo_desk.scenegen import FogDataset
from fifo_desk.tensorcore import Tape
from fifo_desk.trainer import (
    CONFIG_SNAPSHOT,
    FOGPASS_DIR,
    TRAIN_LOG,
    Trainer,
    load_checkpoint,
    poly_decay,
    sample_minibatch,
    train,
    train_content_filter,
)
from tests.conftest import micro_config


def _read_log(run: Path) -> list[dict[str, str]]:
    with open(run / TRAIN_LOG, newline="") as f:
        return list(csv.DictReader(f))


def _snapshot(params: list) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _unchanged(before: list[np.ndarray], params: list) -> bool:
    return all(np.array_equal(a, p.data) for a, p in zip(before, params, strict=True))


class TestPolyDecay:
    """Test the polynomial learning-rate schedule."""

    def test_half_way(self) -> None:
        """Test 6e-4 half way through with power 0.5."""
        assert poly_decay(6e-4, 3000, 6000, 0.5) == pytest.approx(4.2426e-4, rel=1e-4)

    def test_end_points(self) -> None:
        """Test the schedule starts at lr0 and ends at 0."""
        assert poly_decay(1e-3, 0, 10, 0.9) == 1e-3
        assert poly_decay(1e-3, 10, 10, 0.9) == 0.0

    def test_rejects_bad_arguments(self) -> None:
        """Test total 0 and out-of-range iterations are rejected."""
        with pytest.raises(ValueError):
            poly_decay(1e-3, 0, 0, 0.9)
        with pytest.raises(ValueError):
            poly_decay(1e-3, 11, 10, 0.9)


class TestSampleMinibatch:
    """Test mini-batch sampling."""

    def test_counterparts_and_sizes(self, micro_dataset: FogDataset) -> None:
        """Test every SF sample is the counterpart of the CW sample at its position."""
        batch = sample_minibatch(micro_dataset, np.random.default_rng(0), 3)
        assert len(batch) == 3
        assert len(batch.rf) == 3
        assert [r.pair_id for r in batch.cw] == [r.pair_id for r in batch.sf]
        assert all(r.domain is Domain.RF for r in batch.rf)
        assert len({r.pair_id for r in batch.cw}) == 3

    def test_without_flips(self, micro_dataset: FogDataset) -> None:
        """Test hflip=False never flips."""
        batch = sample_minibatch(micro_dataset, np.random.default_rng(0), 2, hflip=False)
        assert batch.cw_flips == [False, False]
        assert batch.rf_flips == [False, False]

    def test_reproducible(self, micro_dataset: FogDataset) -> None:
        """Test equal generator seeds draw equal batches."""
        a = sample_minibatch(micro_dataset, np.random.default_rng(5), 2)
        b = sample_minibatch(micro_dataset, np.random.default_rng(5), 2)
        assert a == b

    def test_batch_too_large(self, micro_dataset: FogDataset) -> None:
        """Test a batch larger than the split is rejected."""
        with pytest.raises(ConfigError):
            sample_minibatch(micro_dataset, np.random.default_rng(0), 5)


class TestTrainerSteps:
    """Test the freeze contracts of the alternating steps."""

    def test_filter_step_leaves_network(self, micro_data: Path) -> None:
        """Test a filter step changes the filters and never the network."""
        trainer = Trainer(micro_config(micro_data), FogDataset(micro_data))
        net_before = _snapshot(trainer.net.parameters())
        filters_before = _snapshot(trainer.filter_parameters())
        losses = trainer.filter_step(trainer.sample(Phase.WARMUP, "filter", 0))
        assert sorted(losses) == ["C1", "R1"]
        assert all(v >= 0 for v in losses.values())
        assert _unchanged(net_before, trainer.net.parameters())
        assert not _unchanged(filters_before, trainer.filter_parameters())

    def test_seg_step_leaves_filters(self, micro_data: Path) -> None:
        """Test a segmentation step changes the network and never the filters."""
        config = micro_config(micro_data, lambda_fsm=1.0)
        trainer = Trainer(config, FogDataset(micro_data))
        net_before = _snapshot(trainer.net.parameters())
        filters_before = _snapshot(trainer.filter_parameters())
        result = trainer.seg_step(trainer.sample(Phase.FIFO, "seg", 1), 1)
        assert result.total == pytest.approx(result.seg_ce + result.fsm + 1e-4 * result.con)
        assert _unchanged(filters_before, trainer.filter_parameters())
        assert not _unchanged(net_before, trainer.net.parameters())
        assert all(p.grad is None for p in trainer.filter_parameters())

    def test_seg_step_without_style_terms(self, micro_data: Path) -> None:
        """Test zero weights reduce the step to supervised segmentation."""
        config = micro_config(micro_data, lambda_fsm=0.0, lambda_con=0.0)
        trainer = Trainer(config, FogDataset(micro_data))
        result = trainer.seg_step(trainer.sample(Phase.FIFO, "seg", 1), 1)
        assert result.total == pytest.approx(result.seg_ce)

    def test_gram_representation(self, micro_data: Path) -> None:
        """Test matching Gram vectors directly runs without filters in the graph."""
        config = micro_config(micro_data, fsm_representation="gram")
        trainer = Trainer(config, FogDataset(micro_data))
        result = trainer.seg_step(trainer.sample(Phase.FIFO, "seg", 1), 1)
        assert np.isfinite(result.total)

    @pytest.mark.parametrize(
        ("direction", "first_grad", "second_grad"),
        [
            ("bidirectional", True, True),
            ("fog_to_clear", False, True),
            ("clear_to_fog", True, False),
        ],
    )
    def test_direction_detaches_one_member(
        self, micro_data: Path, direction: str, first_grad: bool, second_grad: bool
    ) -> None:
        """Test which style-pair member stays attached to the tape."""
        trainer = Trainer(micro_config(micro_data, fsm_direction=direction), FogDataset(micro_data))
        images = trainer.batch_images(trainer.sample(Phase.FIFO, "seg", 0))
        with Tape() as tape:
            clearer = trainer.net.forward(images[Domain.CW][0])
            foggier = trainer.net.forward(images[Domain.RF][0])
            pairs = trainer._style_pairs(clearer, foggier)
        tape.clear()
        assert [p.tap for p in pairs] == ["C1", "R1"]
        assert pairs[0].first.requires_grad is first_grad
        assert pairs[0].second.requires_grad is second_grad

    def test_rf_labels_never_read(self, micro_data: Path) -> None:
        """Test training reads labels of CW and SF samples only."""
        trainer = Trainer(micro_config(micro_data), FogDataset(micro_data))
        original = FogDataset.labels
        with patch.object(FogDataset, "labels", autospec=True, side_effect=original) as spy:
            trainer.pretrain_step(0, trainer.new_seg_optimizer())
            trainer.seg_step(trainer.sample(Phase.FIFO, "seg", 1), 1)
        domains = {call.args[1].domain for call in spy.call_args_list}
        assert spy.call_count > 0
        assert Domain.RF not in domains

    def test_sf_beta_override(self, micro_data: Path, caplog: pytest.LogCaptureFixture) -> None:
        """Test a beta differing from the dataset re-synthesizes SF in memory."""
        dataset = FogDataset(micro_data)
        with caplog.at_level(logging.WARNING):
            trainer = Trainer(micro_config(micro_data, beta=0.05), dataset)
        assert "re-synthesizing" in caplog.text
        batch = trainer.sample(Phase.FIFO, "seg", 0)
        synthesized = trainer.batch_images(batch)[Domain.SF][0]
        stored = dataset.image(batch.sf[0])
        if batch.cw_flips[0]:
            stored = stored[:, ::-1]
        assert not np.allclose(synthesized, stored, atol=0.02)


class TestTrain:
    """Test complete micro training runs."""

    def test_checkpoints(self, micro_run: Path) -> None:
        """Test the checkpoint directories of a complete run."""
        for name in ("pretrained", "warmup", "iter_2", "final"):
            directory = micro_run / name
            assert (directory / "network.csv").exists()
            assert (directory / CONFIG_SNAPSHOT).exists()
            assert sorted(p.name for p in (directory / FOGPASS_DIR).iterdir()) == ["C1", "R1"]
        net, filters = load_checkpoint(micro_run / "final")
        assert net.num_classes == 4
        assert sorted(filters) == ["C1", "R1"]

    def test_log_rows(self, micro_run: Path) -> None:
        """Test one row per iteration with phase-appropriate columns."""
        rows = _read_log(micro_run)
        assert [(r["iter"], r["phase"]) for r in rows] == [
            ("0", "pretrain"),
            ("1", "pretrain"),
            ("0", "warmup"),
            ("1", "fifo"),
            ("2", "fifo"),
        ]
        assert rows[0]["filter_loss_C1"] == ""
        assert float(rows[0]["lr_encoder"]) == pytest.approx(6e-4)
        assert rows[2]["seg_ce"] == ""
        assert float(rows[2]["filter_loss_R1"]) >= 0.0
        assert float(rows[3]["lr_decoder"]) == pytest.approx(6e-3)
        assert float(rows[4]["lr_decoder"]) == pytest.approx(6e-3 * 0.5**0.5)
        assert all(float(r["total"]) > 0 for r in rows[3:])

    def test_deterministic(self, micro_run: Path, micro_data: Path, tmp_path: Path) -> None:
        """Test a second run with the same seed writes the same log and weights."""
        train(micro_config(micro_data), micro_data, tmp_path)
        assert (tmp_path / TRAIN_LOG).read_bytes() == (micro_run / TRAIN_LOG).read_bytes()
        for path in sorted((micro_run / "final").rglob("*.fgten")):
            copy = tmp_path / "final" / path.relative_to(micro_run / "final")
            assert copy.read_bytes() == path.read_bytes()

    def test_each_step_changes_one_parameter_set(self, micro_data: Path, tmp_path: Path) -> None:
        """Test every step over ten iterations updates exactly one of network and filters."""
        config = micro_config(micro_data, warmup_iters=3, total_iters=10, checkpoint_interval=5)
        trace: list[tuple[str, bool, bool]] = []
        filter_step = Trainer.filter_step
        seg_step = Trainer.seg_step

        def record(kind: str, trainer: Trainer, step, *args):
            net_before = _snapshot(trainer.net.parameters())
            filters_before = _snapshot(trainer.filter_parameters())
            out = step(trainer, *args)
            net_changed = not _unchanged(net_before, trainer.net.parameters())
            filters_changed = not _unchanged(filters_before, trainer.filter_parameters())
            trace.append((kind, net_changed, filters_changed))
            return out

        def recorded_filter_step(self: Trainer, batch):
            return record("filter", self, filter_step, batch)

        def recorded_seg_step(self: Trainer, batch, iteration: int):
            return record("seg", self, seg_step, batch, iteration)

        with (
            patch.object(Trainer, "filter_step", recorded_filter_step),
            patch.object(Trainer, "seg_step", recorded_seg_step),
        ):
            train(config, micro_data, tmp_path)

        warmup = [("filter", False, True)] * 3
        fifo = [("filter", False, True), ("seg", True, False)] * 7
        assert trace == warmup + fifo

    def test_warm_start_skips_pretraining(
        self, micro_run: Path, micro_data: Path, tmp_path: Path
    ) -> None:
        """Test init_checkpoint skips the pretraining phase."""
        config = micro_config(micro_data, init_checkpoint=str(micro_run / "final"), total_iters=1)
        result = train(config, micro_data, tmp_path)
        assert not (tmp_path / "pretrained").exists()
        assert [r["phase"] for r in _read_log(tmp_path)] == ["warmup"]
        assert result.final == tmp_path / "final"
        assert (tmp_path / "warmup").exists()

    def test_non_finite_loss_aborts(self, micro_data: Path, tmp_path: Path) -> None:
        """Test a non-finite filter loss aborts with the last checkpoint."""
        with (
            patch.object(Trainer, "filter_step", return_value={"C1": float("nan")}),
            pytest.raises(TrainingAborted) as exc,
        ):
            train(micro_config(micro_data), micro_data, tmp_path)
        assert exc.value.phase == "warmup"
        assert exc.value.iteration == 0
        assert exc.value.last_checkpoint == str(tmp_path / "pretrained")


class TestContentFilter:
    """Test content-pass filter training."""

    def test_trains_on_gram_vectors(self, micro_run: Path, micro_data: Path) -> None:
        """Test the filter input size, trace length and that the network is untouched."""
        net, _ = load_checkpoint(micro_run / "final")
        before = _snapshot(net.parameters())
        content, trace = train_content_filter(
            micro_config(micro_data), net, FogDataset(micro_data), "R1"
        )
        channels = net.tap_channels("R1")
        assert content.input_dim == channels * (channels + 1) // 2
        assert len(trace) == 2
        assert all(np.isfinite(trace))
        assert net.tap_layers == ["C1", "R1"]
        assert _unchanged(before, net.parameters())
