"""Tests for the segnet module."""

from pathlib import Path

import numpy as np
import pytest

from fifo_desk.errors import ConfigError, DatasetIOError, ShapeError
from fifo_desk.segnet import NETWORK_CSV, SegNetwork, architecture, build_network
from fifo_desk.tensorcore import Tape, Tensor, ops


@pytest.fixture
def net() -> SegNetwork:
    return build_network(seed=1, num_classes=4, width_base=8, tap_layers=["C1", "R1", "R2", "R3"])


@pytest.fixture
def image() -> np.ndarray:
    return np.random.default_rng(0).uniform(size=(16, 16, 3))


class TestBuildNetwork:
    """Test network construction."""

    def test_param_count(self, net: SegNetwork) -> None:
        """Test the parameter count of the width-8, 4-class network."""
        assert net.param_count() == sum(s.param_count for s in architecture(4, 8))
        assert net.param_count() == 12092

    def test_groups_partition_parameters(self, net: SegNetwork) -> None:
        """Test encoder and decoder groups cover every parameter once."""
        encoder = net.group_parameters("encoder")
        decoder = net.group_parameters("decoder")
        assert len(encoder) + len(decoder) == len(net.parameters())
        assert {id(p) for p in encoder}.isdisjoint(id(p) for p in decoder)
        assert len(decoder) == 6

    def test_deterministic_init(self) -> None:
        """Test equal seeds give equal weights and zero biases."""
        a = build_network(seed=3, num_classes=4, width_base=8)
        b = build_network(seed=3, num_classes=4, width_base=8)
        for name, tensor in a.params.items():
            assert np.array_equal(tensor.data, b.params[name].data)
        assert np.all(a.params["stem.bias"].data == 0)

    def test_default_taps(self) -> None:
        """Test the default taps are C1 and R1."""
        assert build_network(seed=0, num_classes=4, width_base=8).tap_layers == ["C1", "R1"]

    def test_rejects_bad_width(self) -> None:
        """Test widths outside [8, 64] are rejected."""
        with pytest.raises(ConfigError):
            build_network(seed=0, num_classes=4, width_base=4)

    def test_rejects_unknown_tap(self) -> None:
        """Test unknown tap names are rejected."""
        with pytest.raises(ConfigError):
            build_network(seed=0, num_classes=4, width_base=8, tap_layers=["X1"])


class TestForward:
    """Test the forward pass."""

    def test_shapes(self, net: SegNetwork, image: np.ndarray) -> None:
        """Test logits, probabilities and tap shapes."""
        out = net.forward(image)
        assert out.logits.shape == (16, 16, 4)
        assert out.probs.shape == (16, 16, 4)
        assert out.taps["C1"].shape == (8, 16, 16)
        assert out.taps["R1"].shape == (8, 8, 8)
        assert out.taps["R2"].shape == (16, 4, 4)
        assert out.taps["R3"].shape == (16, 4, 4)
        assert out.spatial_size("R1") == 64
        assert out.channels("R2") == net.tap_channels("R2") == 16

    def test_probabilities_sum_to_one(self, net: SegNetwork, image: np.ndarray) -> None:
        """Test softmax output sums to one per pixel."""
        np.testing.assert_allclose(net.forward(image).probs.data.sum(axis=-1), 1.0)

    def test_only_active_taps_returned(self, image: np.ndarray) -> None:
        """Test inactive taps are not emitted."""
        net = build_network(seed=1, num_classes=4, width_base=8, tap_layers=["R2"])
        assert list(net.forward(image).taps) == ["R2"]

    def test_predict(self, net: SegNetwork, image: np.ndarray) -> None:
        """Test predict returns an arg-max class map."""
        prediction = net.predict(image)
        assert prediction.shape == (16, 16)
        assert prediction.dtype == np.uint8
        assert prediction.max() < 4

    def test_rejects_bad_shape(self, net: SegNetwork) -> None:
        """Test sizes not divisible by 4 are rejected."""
        with pytest.raises(ShapeError):
            net.forward(np.zeros((18, 16, 3)))

    def test_gradients_reach_every_parameter(self, net: SegNetwork, image: np.ndarray) -> None:
        """Test a backward pass from the logits fills every parameter gradient."""
        with Tape() as tape:
            loss = ops.sum(ops.square(net.forward(Tensor(image)).logits))
        tape.backward(loss)
        assert all(p.grad is not None and p.grad.shape == p.shape for p in net.parameters())
        tape.clear()


class TestSaveLoad:
    """Test checkpoint round trips."""

    def test_round_trip(self, net: SegNetwork, image: np.ndarray, tmp_path: Path) -> None:
        """Test a loaded network reproduces the logits of the saved one."""
        net.save(tmp_path / "ckpt")
        loaded = SegNetwork.load(tmp_path / "ckpt")
        assert loaded.tap_layers == net.tap_layers
        assert loaded.num_classes == 4
        assert loaded.width_base == 8
        assert np.array_equal(loaded.forward(image).logits.data, net.forward(image).logits.data)

    def test_network_csv_marks_active_taps(self, tmp_path: Path) -> None:
        """Test network.csv records which taps are active."""
        net = build_network(seed=0, num_classes=4, width_base=8, tap_layers=["R1"])
        net.save(tmp_path)
        lines = (tmp_path / NETWORK_CSV).read_text().splitlines()
        assert lines[0].endswith("tap,tap_active")
        assert "stem,conv,3,8,3,1,encoder,C1,0" in lines
        assert "res1.conv2,conv,8,8,3,1,encoder,R1,1" in lines

    def test_missing_parameter(self, net: SegNetwork, tmp_path: Path) -> None:
        """Test a missing parameter file raises DatasetIOError."""
        net.save(tmp_path)
        (tmp_path / "head.bias.fgten").unlink()
        with pytest.raises(DatasetIOError):
            SegNetwork.load(tmp_path)

    def test_missing_directory(self, tmp_path: Path) -> None:
        """Test loading from an empty directory raises DatasetIOError."""
        with pytest.raises(DatasetIOError):
            SegNetwork.load(tmp_path / "absent")
