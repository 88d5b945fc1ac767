"""Tests for the metrics module."""

import math

import numpy as np
import pytest

from fifo_desk.errors import DomainValueError, ShapeError
from fifo_desk.fifo_types import Domain
from fifo_desk.metrics import (
    ConfusionMatrix,
    FactorSet,
    avg_hausdorff,
    clustering_indices,
    independence_score,
    kmeans,
    l2_normalize,
    miou,
)


def _directions(degrees: list[float]) -> np.ndarray:
    radians = np.deg2rad(degrees)
    return np.stack([np.cos(radians), np.sin(radians)], axis=1)


class TestMIoU:
    """Test confusion matrices and mIoU."""

    def test_perfect_prediction(self) -> None:
        """Test prediction equal to ground truth gives 1.0."""
        truth = np.array([[0, 1], [2, 3]])
        assert miou([truth], [truth], 4).mean == 1.0

    def test_binary_case(self) -> None:
        """Test three correct class-0 pixels and one missed class-1 pixel."""
        truth = np.array([[0, 0], [0, 1]])
        result = miou([np.zeros((2, 2), dtype=int)], [truth], 2)
        assert result.per_class == [0.75, 0.0]
        assert result.mean == 0.375

    def test_absent_class_excluded(self) -> None:
        """Test classes absent from prediction and truth do not count."""
        truth = np.array([[0, 1]])
        result = miou([truth], [truth], 4)
        assert math.isnan(result.per_class[3])
        assert result.mean == 1.0

    def test_ignore_label(self) -> None:
        """Test pixels labeled 255 are skipped."""
        cm = ConfusionMatrix(2)
        cm.add(np.array([0, 1, 1]), np.array([0, 255, 1]))
        assert cm.total == 2
        np.testing.assert_array_equal(cm.counts, [[1, 0], [0, 1]])

    def test_all_ignored(self) -> None:
        """Test a fully ignored ground truth is rejected."""
        with pytest.raises(DomainValueError):
            miou([np.zeros((1, 2))], [np.full((1, 2), 255)], 2)

    def test_shape_mismatch(self) -> None:
        """Test mismatched masks are rejected."""
        with pytest.raises(ShapeError):
            miou([np.zeros((2, 2))], [np.zeros((2, 3))], 2)
        with pytest.raises(ShapeError):
            miou([np.zeros((2, 2))], [], 2)

    def test_class_out_of_range(self) -> None:
        """Test class ids past num_classes are rejected."""
        with pytest.raises(DomainValueError):
            miou([np.array([[5]])], [np.array([[0]])], 2)


class TestClustering:
    """Test k-means and the clustering agreement indices."""

    def test_identical_partitions(self) -> None:
        """Test equal assignments score 1 on every index."""
        labels = [0, 0, 1, 1, 2, 2]
        scores = clustering_indices(labels, labels)
        assert scores == pytest.approx({"ARI": 1.0, "NMI": 1.0, "AMI": 1.0})

    def test_relabelled_partition(self) -> None:
        """Test cluster ids are compared up to permutation."""
        scores = clustering_indices([2, 2, 0, 0], [0, 0, 1, 1])
        assert scores["ARI"] == pytest.approx(1.0)

    def test_checkerboard(self) -> None:
        """Test assignments independent of a balanced truth score ARI <= 0."""
        truth = [0, 0, 0, 0, 1, 1, 1, 1]
        assignments = [0, 1, 0, 1, 0, 1, 0, 1]
        assert clustering_indices(assignments, truth)["ARI"] <= 0.0

    def test_single_cluster(self) -> None:
        """Test one cluster in both labelings counts as identical."""
        assert clustering_indices([0, 0, 0], [1, 1, 1])["ARI"] == 1.0

    def test_length_mismatch(self) -> None:
        """Test label sequences of different length are rejected."""
        with pytest.raises(ShapeError):
            clustering_indices([0, 1], [0])

    def test_kmeans_recovers_separated_clusters(self) -> None:
        """Test k-means on three well-separated blobs."""
        rng = np.random.default_rng(0)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        points = np.concatenate([c + rng.normal(0, 0.1, size=(10, 2)) for c in centers])
        truth = np.repeat([0, 1, 2], 10)
        assignments = kmeans(points, 3, seed=4)
        assert clustering_indices(assignments, truth)["ARI"] == pytest.approx(1.0)

    def test_kmeans_deterministic(self) -> None:
        """Test equal seeds give equal assignments."""
        points = np.random.default_rng(1).normal(size=(20, 3))
        assert np.array_equal(kmeans(points, 3, seed=2**40 + 5), kmeans(points, 3, seed=2**40 + 5))

    def test_kmeans_rejects_bad_k(self) -> None:
        """Test k larger than the point count is rejected."""
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2)), 3, seed=0)

    def test_kmeans_rejects_empty(self) -> None:
        """Test empty input raises DomainValueError."""
        with pytest.raises(DomainValueError):
            kmeans(np.zeros((0, 2)), 1, seed=0)


class TestHausdorff:
    """Test the average Hausdorff distance."""

    def test_orthogonal_singletons(self) -> None:
        """Test (1, 0) against (0, 1) under cosine distance is 1."""
        assert avg_hausdorff([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(1.0)

    def test_identical_sets(self) -> None:
        """Test a set against itself is 0."""
        points = np.random.default_rng(0).normal(size=(5, 3))
        assert avg_hausdorff(points, points) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self) -> None:
        """Test the distance does not depend on argument order."""
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        assert avg_hausdorff(a, b) == pytest.approx(avg_hausdorff(b, a))

    def test_euclidean(self) -> None:
        """Test the Euclidean variant averages both directed means."""
        value = avg_hausdorff([[0.0], [1.0]], [[3.0]], metric="euclidean")
        assert value == pytest.approx(0.5 * ((3.0 + 2.0) / 2 + 2.0))

    def test_errors(self) -> None:
        """Test empty sets, zero vectors, dimension and metric errors."""
        with pytest.raises(DomainValueError):
            avg_hausdorff(np.zeros((0, 2)), [[1.0, 0.0]])
        with pytest.raises(DomainValueError):
            avg_hausdorff([[0.0, 0.0]], [[1.0, 0.0]])
        with pytest.raises(ShapeError):
            avg_hausdorff([[1.0, 0.0]], [[1.0, 0.0, 0.0]])
        with pytest.raises(ValueError, match="metric"):
            avg_hausdorff([[1.0]], [[1.0]], metric="manhattan")

    def test_factor_set_by_domain(self) -> None:
        """Test FactorSet splits points by domain."""
        factors = FactorSet(np.eye(3), [Domain.CW, Domain.RF, Domain.CW])
        np.testing.assert_array_equal(factors.of(Domain.CW), [[1, 0, 0], [0, 0, 1]])
        assert factors.of(Domain.SF).shape[0] == 0
        with pytest.raises(ShapeError):
            FactorSet(np.eye(2), [Domain.CW])

    def test_l2_normalize(self) -> None:
        """Test rows are scaled to unit length."""
        np.testing.assert_allclose(l2_normalize([[3.0, 4.0]]), [[0.6, 0.8]])
        with pytest.raises(DomainValueError):
            l2_normalize([[0.0, 0.0]])


class TestIndependence:
    """Test the nearest-neighbor independence score."""

    def test_identical_spaces(self) -> None:
        """Test identical fog and content factors score 0."""
        points = np.random.default_rng(0).normal(size=(10, 4))
        assert independence_score(points, points, k=3) == 0.0

    def test_disjoint_neighbors(self) -> None:
        """Test disjoint neighbor sets for every anchor score 1."""
        fog = _directions([0.0, 10.0, 90.0, 100.0])
        content = _directions([0.0, 90.0, 10.0, 100.0])
        assert independence_score(fog, content, k=1) == 1.0

    def test_k_clamped(self) -> None:
        """Test k above N - 1 compares every other point, giving full overlap."""
        rng = np.random.default_rng(1)
        assert independence_score(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), k=200) == 0.0

    def test_errors(self) -> None:
        """Test count mismatches and single points are rejected."""
        with pytest.raises(ShapeError):
            independence_score(np.ones((3, 2)), np.ones((2, 2)))
        with pytest.raises(DomainValueError):
            independence_score(np.ones((1, 2)), np.ones((1, 2)))
