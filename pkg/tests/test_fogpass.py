"""Tests for the fogpass module."""

import math
from pathlib import Path

import numpy as np
import pytest

from fifo_desk.errors import DatasetIOError, DomainValueError, ShapeError
from fifo_desk.fifo_types import Domain
from fifo_desk.fogpass import (
    FogFactor,
    FogPassFilter,
    content_filter_loss,
    filter_loss,
    fog_factor,
    gram,
    gram_vector,
    gram_vector_length,
    load_filters,
    save_filters,
    upper_tri_vec,
)
from fifo_desk.tensorcore import Tensor, grad_check, ops


def _factor(values: list[float], domain: Domain, pair_id: int | None = None) -> FogFactor:
    return FogFactor(Tensor(values), domain, "C1", pair_id)


def _at_distance(d: float) -> list[float]:
    """Unit vector at cosine distance d from (1, 0)."""
    c = 1.0 - d
    return [c, math.sqrt(1.0 - c * c)]


class TestGram:
    """Test Gram matrices and their vectorization."""

    def test_single_channel(self) -> None:
        """Test a (1, 2, 2) map of (1, 2, 2, 0) gives [[9]]."""
        g = gram(Tensor([[[1.0, 2.0], [2.0, 0.0]]]))
        np.testing.assert_allclose(g.data, [[9.0]])

    def test_zero_map(self) -> None:
        """Test a zero map gives a zero matrix."""
        assert not np.any(gram(Tensor(np.zeros((3, 2, 2)))).data)

    def test_symmetric_and_scales_quadratically(self) -> None:
        """Test symmetry and G(s * a) = s^2 G(a)."""
        a = np.random.default_rng(0).normal(size=(4, 3, 3))
        g = gram(Tensor(a)).data
        np.testing.assert_allclose(g, g.T)
        np.testing.assert_allclose(gram(Tensor(3.0 * a)).data, 9.0 * g, rtol=1e-9)

    def test_rejects_flat_input(self) -> None:
        """Test a 2-D input is rejected."""
        with pytest.raises(ShapeError):
            gram(Tensor(np.zeros((2, 2))))

    def test_upper_tri_vec(self) -> None:
        """Test [[1, 2], [2, 3]] vectorizes to (1, 2, 3)."""
        u = upper_tri_vec(Tensor([[1.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(u.values.data, [1.0, 2.0, 3.0])
        assert u.channels == 2

    def test_vector_lengths(self) -> None:
        """Test c(c+1)/2 lengths."""
        assert gram_vector_length(1) == 1
        assert gram_vector_length(8) == 36
        assert upper_tri_vec(Tensor(np.eye(8))).values.shape == (36,)

    def test_rejects_asymmetric(self) -> None:
        """Test an asymmetric matrix is rejected."""
        with pytest.raises(DomainValueError):
            upper_tri_vec(Tensor([[1.0, 2.0], [2.5, 3.0]]))

    def test_reconstruction(self) -> None:
        """Test the upper triangle reconstructs a symmetric matrix."""
        a = np.random.default_rng(1).normal(size=(5, 5))
        sym = a + a.T
        values = upper_tri_vec(Tensor(sym)).values.data
        rebuilt = np.zeros((5, 5))
        rebuilt[np.triu_indices(5)] = values
        rebuilt = rebuilt + np.triu(rebuilt, k=1).T
        np.testing.assert_allclose(rebuilt, sym)

    def test_gram_vector_normalizes_by_spatial_size(self) -> None:
        """Test the Gram vector is divided by n_l."""
        u = gram_vector(Tensor(np.ones((2, 2, 3))), "R1")
        np.testing.assert_allclose(u.values.data, [1.0, 1.0, 1.0])
        assert u.spatial_size == 6
        assert u.source_tap == "R1"


class TestFogPassFilter:
    """Test the filter perceptron."""

    def test_zero_filter_gives_zero_factor(self) -> None:
        """Test zero weights and biases give a zero factor."""
        f = FogPassFilter.build(0, "C1", input_dim=3, dim=4)
        for p in f.parameters():
            p.data[...] = 0.0
        u = upper_tri_vec(Tensor([[1.0, 2.0], [2.0, 3.0]]))
        assert not np.any(fog_factor(f, u, Domain.CW).values.data)

    def test_shapes(self) -> None:
        """Test single and stacked inputs."""
        f = FogPassFilter.build(0, "C1", input_dim=6, dim=4)
        assert f(Tensor(np.ones(6))).shape == (4,)
        assert f(Tensor(np.ones((5, 6)))).shape == (5, 4)
        assert f.params["w1"].shape == (6, 8)

    def test_dimension_mismatch(self) -> None:
        """Test a wrong input width raises ShapeError."""
        f = FogPassFilter.build(0, "C1", input_dim=6, dim=4)
        with pytest.raises(ShapeError):
            f(Tensor(np.ones(5)))

    def test_deterministic(self) -> None:
        """Test identical seeds and inputs give identical factors."""
        u = Tensor(np.linspace(0, 1, 6))
        a = FogPassFilter.build(9, "R1", 6, 4)(u).data
        b = FogPassFilter.build(9, "R1", 6, 4)(u).data
        assert np.array_equal(a, b)

    def test_factor_gradients(self) -> None:
        """Test gradients of the squared factor norm with respect to filter parameters."""
        f = FogPassFilter.build(2, "C1", input_dim=6, dim=4)
        u = Tensor(np.random.default_rng(3).uniform(size=6))

        def resample(rng: np.random.Generator) -> None:
            u.data[...] = rng.uniform(size=6)

        error = grad_check(
            lambda: ops.sum(ops.square(f(u))), f.parameters(), seed=1, resample=resample
        )
        assert error < 1e-5

    def test_save_load(self, tmp_path: Path) -> None:
        """Test filters round-trip through a directory per tap."""
        filters = {tap: FogPassFilter.build(i, tap, 6, 4) for i, tap in enumerate(["C1", "R1"])}
        save_filters(tmp_path, filters)
        loaded = load_filters(tmp_path)
        assert sorted(loaded) == ["C1", "R1"]
        for tap, f in filters.items():
            for a, b in zip(f.parameters(), loaded[tap].parameters(), strict=True):
                assert np.array_equal(a.data, b.data)

    def test_load_missing(self, tmp_path: Path) -> None:
        """Test a missing filter directory raises DatasetIOError."""
        with pytest.raises(DatasetIOError):
            load_filters(tmp_path / "fogpass")


class TestFilterLoss:
    """Test the fog-pass contrastive loss."""

    def test_identical_same_domain(self) -> None:
        """Test identical same-domain factors cost nothing."""
        factors = [_factor([1.0, 2.0], Domain.SF), _factor([1.0, 2.0], Domain.SF)]
        assert filter_loss(factors, 0.1).item() == 0.0

    def test_orthogonal_cross_domain(self) -> None:
        """Test orthogonal factors of different domains cost nothing."""
        factors = [_factor([1.0, 0.0], Domain.CW), _factor([0.0, 1.0], Domain.RF)]
        assert filter_loss(factors, 0.1).item() == pytest.approx(0.0)

    def test_same_domain_pull(self) -> None:
        """Test a same-domain pair at distance 0.3 costs (0.3 - 0.1)^2."""
        factors = [_factor([1.0, 0.0], Domain.RF), _factor(_at_distance(0.3), Domain.RF)]
        assert filter_loss(factors, 0.1).item() == pytest.approx(0.04, abs=1e-12)

    def test_scale_invariant(self) -> None:
        """Test rescaling one factor leaves the loss unchanged."""
        rng = np.random.default_rng(4)
        values = rng.normal(size=(4, 3))
        domains = [Domain.CW, Domain.CW, Domain.SF, Domain.RF]

        def loss() -> float:
            pairs = zip(values, domains, strict=True)
            return filter_loss([_factor(list(v), d) for v, d in pairs], 0.5).item()

        base = loss()
        values[2] *= 2.0
        scaled = loss()
        assert scaled == pytest.approx(base, abs=1e-9)

    def test_single_factor(self) -> None:
        """Test one factor gives an empty pair set."""
        assert filter_loss([_factor([1.0], Domain.CW)], 0.1).item() == 0.0

    def test_zero_factor_rejected(self) -> None:
        """Test a zero-norm factor raises DomainValueError."""
        with pytest.raises(DomainValueError):
            filter_loss([_factor([0.0, 0.0], Domain.CW), _factor([1.0, 0.0], Domain.SF)], 0.1)

    def test_margin_range(self) -> None:
        """Test margins outside (0, 2) are rejected."""
        factors = [_factor([1.0, 0.0], Domain.CW), _factor([0.0, 1.0], Domain.SF)]
        with pytest.raises(ValueError, match="margin"):
            filter_loss(factors, 2.0)


class TestContentFilterLoss:
    """Test the content-pass contrastive loss."""

    def test_counterparts_identical(self) -> None:
        """Test a CW-SF counterpart pair with identical factors costs nothing."""
        factors = [_factor([1.0, 1.0], Domain.CW, 3), _factor([1.0, 1.0], Domain.SF, 3)]
        assert content_filter_loss(factors, 0.1).item() == 0.0

    def test_cw_rf_push(self) -> None:
        """Test a CW-RF pair at distance 0.05 costs (0.1 - 0.05)^2."""
        factors = [_factor([1.0, 0.0], Domain.CW, 0), _factor(_at_distance(0.05), Domain.RF, 0)]
        assert content_filter_loss(factors, 0.1).item() == pytest.approx(0.0025, abs=1e-12)

    def test_same_domain_is_negative(self) -> None:
        """Test two CW images are pushed apart, unlike in the fog-pass loss."""
        factors = [_factor([1.0, 0.0], Domain.CW, 0), _factor([1.0, 0.0], Domain.CW, 1)]
        assert content_filter_loss(factors, 0.1).item() == pytest.approx(0.01)
        assert filter_loss(factors, 0.1).item() == 0.0

    def test_single_factor(self) -> None:
        """Test one factor gives an empty pair set."""
        assert content_filter_loss([_factor([1.0], Domain.CW, 0)], 0.1).item() == 0.0

    def test_requires_pair_ids(self) -> None:
        """Test factors without pair ids are rejected."""
        with pytest.raises(ValueError, match="pair_id"):
            content_filter_loss([_factor([1.0], Domain.CW)], 0.1)
