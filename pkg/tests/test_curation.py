import itertools

import numpy as np
import pytest

from protoflow.core import SeededRng, ZeroVector
from protoflow.curation import (BudgetExceedsPopulation, ImageTooSmall, KExceedsRows,
                                dedup, kmeans, laplacian_variance, proportional_sample,
                                rare_first_sample, sharpness_filter)


def planted_pair(cos_target: float) -> np.ndarray:
    """Two unit rows with exact cosine cos_target, by 2-D rotation."""
    theta = np.arccos(cos_target)
    return np.array([[1.0, 0.0], [np.cos(theta), np.sin(theta)]])


def conv_variance_oracle(img: np.ndarray) -> float:
    """Direct double-loop 4-neighbor Laplacian + population variance."""
    h, w = img.shape
    responses = []
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            responses.append(img[i - 1, j] + img[i + 1, j] + img[i, j - 1]
                             + img[i, j + 1] - 4 * img[i, j])
    responses = np.array(responses)
    return float(np.mean((responses - responses.mean()) ** 2))


class TestDedup:
    def test_exact_duplicate(self):
        rows = np.array([[1.0, 2.0], [1.0, 2.0]])
        assert dedup(rows, 0.95) == [0]

    def test_orthogonal_all_kept(self):
        assert dedup(np.eye(4), 0.95) == [0, 1, 2, 3]

    def test_planted_pair_above_threshold(self):
        # cosine exactly 0.96 > 0.95: second of the pair must drop.
        assert dedup(planted_pair(0.96), 0.95) == [0]

    def test_planted_pair_below_threshold(self):
        assert dedup(planted_pair(0.94), 0.95) == [0, 1]

    def test_zero_row(self):
        with pytest.raises(ZeroVector):
            dedup(np.array([[1.0, 0.0], [0.0, 0.0]]), 0.9)

    def test_idempotent(self):
        rng = SeededRng(3)
        rows = rng.normal(size=(40, 6))
        first = dedup(rows, 0.6)
        again = dedup(rows[first], 0.6)
        assert again == list(range(len(first)))

    def test_postcondition_no_kept_pair_above_threshold(self):
        rng = SeededRng(5)
        rows = rng.normal(size=(60, 4))
        rows[13] = rows[2] * 3.0  # planted duplicate at cosine 1
        kept = dedup(rows, 0.95)
        unit = rows[kept] / np.linalg.norm(rows[kept], axis=1, keepdims=True)
        sims = unit @ unit.T
        np.fill_diagonal(sims, -1.0)
        assert sims.max() <= 0.95
        assert 13 not in kept

    def test_dropped_items_have_kept_neighbor(self):
        rng = SeededRng(9)
        rows = rng.normal(size=(30, 3))
        kept = dedup(rows, 0.8)
        unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        for i in set(range(30)) - set(kept):
            prior = [k for k in kept if k < i]
            assert max(float(unit[k] @ unit[i]) for k in prior) > 0.8


class TestLaplacianVariance:
    def test_constant_image(self):
        assert laplacian_variance(np.full((5, 7), 0.42)) == 0.0

    def test_checkerboard_variance_sixteen(self):
        board = np.indices((4, 4)).sum(axis=0) % 2
        assert laplacian_variance(board.astype(float)) == pytest.approx(16.0, abs=1e-12)

    def test_center_impulse_single_response(self):
        img = np.zeros((3, 3))
        img[1, 1] = 1.0
        # One interior response (-4): population variance of one value is 0.
        assert laplacian_variance(img) == 0.0

    def test_matches_conv_oracle(self):
        rng = SeededRng(1)
        for _ in range(10):
            img = rng.uniform(size=(6, 9))
            assert laplacian_variance(img) == pytest.approx(conv_variance_oracle(img),
                                                            abs=1e-12)

    def test_constant_shift_invariance(self):
        rng = SeededRng(2)
        img = rng.uniform(size=(8, 8))
        assert laplacian_variance(img + 3.7) == pytest.approx(laplacian_variance(img),
                                                              abs=1e-10)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            laplacian_variance(np.zeros((2, 5)))


def _noise_image(rng: SeededRng, amplitude: float) -> np.ndarray:
    return amplitude * rng.uniform(size=(6, 6))


class TestSharpnessFilter:
    def test_keeps_top_half(self):
        rng = SeededRng(4)
        images = [_noise_image(rng, a) for a in (0.0, 0.2, 0.5, 1.0)]
        variances = [laplacian_variance(im) for im in images]
        kept = sharpness_filter(images, 0.5)
        expected = sorted(sorted(range(4), key=lambda i: -variances[i])[:2])
        assert kept == expected

    def test_keep_all(self):
        rng = SeededRng(4)
        images = [_noise_image(rng, a) for a in (0.1, 0.9, 0.4)]
        assert sharpness_filter(images, 1.0) == [0, 1, 2]

    def test_tie_breaks_to_lower_index(self):
        img = _noise_image(SeededRng(8), 1.0)
        images = [img, img.copy(), img.copy()]
        assert sharpness_filter(images, 1 / 3) == [0]

    def test_ceil_keep_count(self):
        rng = SeededRng(4)
        images = [_noise_image(rng, a) for a in (0.1, 0.5, 0.9)]
        assert len(sharpness_filter(images, 0.5)) == 2  # ceil(1.5)


def brute_force_two_partition(points: np.ndarray):
    """Minimum-inertia 2-partition by exhaustive enumeration."""
    n = len(points)
    best, best_sets = np.inf, None
    for size in range(1, n // 2 + 1):
        for subset in itertools.combinations(range(n), size):
            a = list(subset)
            b = [i for i in range(n) if i not in subset]
            inertia = sum(float(np.sum((points[g] - points[g].mean(axis=0)) ** 2))
                          for g in (a, b))
            if inertia < best:
                best, best_sets = inertia, (set(a), set(b))
    return best, best_sets


class TestKmeans:
    def test_two_separated_pairs(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 10.1]])
        result = kmeans(pts, 2, seed=0)
        best_inertia, best_sets = brute_force_two_partition(pts)
        got = [set(np.flatnonzero(result.labels == c)) for c in range(2)]
        assert set(map(frozenset, got)) == set(map(frozenset, best_sets))
        assert result.inertia == pytest.approx(best_inertia, rel=1e-9)
        for c in range(2):
            members = pts[result.labels == c]
            np.testing.assert_allclose(result.centroids[c], members.mean(axis=0))

    def test_k_one_is_global_mean(self):
        rng = SeededRng(6)
        pts = rng.normal(size=(20, 3))
        result = kmeans(pts, 1, seed=1)
        np.testing.assert_allclose(result.centroids[0], pts.mean(axis=0))
        assert result.inertia == pytest.approx(float(np.sum((pts - pts.mean(0)) ** 2)))

    def test_k_equals_n(self):
        rng = SeededRng(7)
        pts = rng.normal(size=(6, 2))
        result = kmeans(pts, 6, seed=2)
        assert result.inertia == pytest.approx(0.0, abs=1e-18)
        assert len(set(result.labels.tolist())) == 6

    def test_inertia_non_increasing(self):
        rng = SeededRng(8)
        pts = rng.normal(size=(80, 4))
        result = kmeans(pts, 5, seed=3)
        history = result.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_reported_inertia_matches_assignment(self):
        rng = SeededRng(9)
        pts = rng.normal(size=(50, 3))
        result = kmeans(pts, 4, seed=4)
        recomputed = sum(float(np.sum((pts[i] - result.centroids[result.labels[i]]) ** 2))
                         for i in range(len(pts)))
        assert result.inertia == pytest.approx(recomputed, rel=1e-6)

    def test_local_optimum_no_single_point_move(self):
        rng = SeededRng(10)
        pts = rng.normal(size=(40, 2))
        result = kmeans(pts, 3, seed=5)
        d2 = np.sum((pts[:, None, :] - result.centroids[None, :, :]) ** 2, axis=2)
        assigned = d2[np.arange(len(pts)), result.labels]
        assert np.all(assigned <= d2.min(axis=1) + 1e-12)

    def test_errors(self):
        with pytest.raises(KExceedsRows):
            kmeans(np.zeros((3, 2)), 4, seed=0)
        with pytest.raises(KExceedsRows):
            kmeans(np.zeros((3, 2)), 0, seed=0)

    def test_deterministic(self):
        rng = SeededRng(11)
        pts = rng.normal(size=(30, 3))
        a = kmeans(pts, 3, seed=9)
        b = kmeans(pts, 3, seed=9)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)


def _assignment_with_sizes(sizes):
    from protoflow.curation import ClusterAssignment

    labels = np.concatenate([np.full(s, c, dtype=np.int64) for c, s in enumerate(sizes)])
    return ClusterAssignment(k=len(sizes), labels=labels,
                             centroids=np.zeros((len(sizes), 1)), inertia=0.0)


class TestProportionalSample:
    def test_largest_remainder_quotas(self):
        assignment = _assignment_with_sizes([80, 20])
        ids = proportional_sample(assignment, 10, seed=1)
        counts = np.bincount(assignment.labels[ids], minlength=2)
        assert counts.tolist() == [8, 2]

    def test_zero_budget(self):
        assignment = _assignment_with_sizes([3, 3])
        assert proportional_sample(assignment, 0, seed=1) == []

    def test_exhaustive(self):
        assignment = _assignment_with_sizes([1, 1, 1])
        assert sorted(proportional_sample(assignment, 3, seed=2)) == [0, 1, 2]

    def test_quotas_sum_and_bounds(self):
        rng = SeededRng(12)
        for _ in range(25):
            sizes = [int(rng.integers(9)) + 1 for _ in range(int(rng.integers(5)) + 1)]
            total = sum(sizes)
            n = int(rng.integers(total + 1))
            assignment = _assignment_with_sizes(sizes)
            ids = proportional_sample(assignment, n, seed=int(rng.integers(1000)))
            assert len(ids) == n
            assert len(set(ids)) == n
            counts = np.bincount(assignment.labels[ids], minlength=len(sizes))
            assert all(c <= s for c, s in zip(counts, sizes))

    def test_budget_exceeds(self):
        assignment = _assignment_with_sizes([2, 2])
        with pytest.raises(BudgetExceedsPopulation):
            proportional_sample(assignment, 5, seed=0)


class TestRareFirstSample:
    def test_smallest_cluster_fully_covered(self):
        assignment = _assignment_with_sizes([100, 5, 3])
        ids = rare_first_sample(assignment, 6, seed=3)
        smallest = set(np.flatnonzero(assignment.labels == 2).tolist())
        assert smallest <= set(ids)

    def test_full_budget_returns_everything(self):
        assignment = _assignment_with_sizes([4, 2])
        assert sorted(rare_first_sample(assignment, 6, seed=4)) == list(range(6))

    def test_single_cluster_distinct(self):
        assignment = _assignment_with_sizes([4])
        ids = rare_first_sample(assignment, 2, seed=5)
        assert len(ids) == len(set(ids)) == 2

    def test_drain_order_by_size_then_index(self):
        assignment = _assignment_with_sizes([3, 3, 1])
        ids = rare_first_sample(assignment, 4, seed=6)
        labels = assignment.labels[ids]
        # Size-1 cluster (index 2) drains first, then the index-0 cluster
        # wins the size tie.
        assert labels[0] == 2
        assert set(labels[1:].tolist()) == {0}

    def test_budget_exceeds(self):
        assignment = _assignment_with_sizes([1])
        with pytest.raises(BudgetExceedsPopulation):
            rare_first_sample(assignment, 2, seed=0)
