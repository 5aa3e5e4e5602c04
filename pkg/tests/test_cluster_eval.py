import itertools

import numpy as np
import pytest

from hsiclust.cluster_eval import (
    ConfusionMatrix,
    NoLabeledPixels,
    compute_metrics,
    hungarian_map,
    labels_to_pixels,
    spherical_kmeans,
)
from hsiclust.hsi_io import LabelRaster


def brute_force_map(counts):
    """Exhaustive permutation search, lexicographically-first maximizer (oracle)."""
    n = max(counts.shape)
    padded = np.zeros((n, n), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts
    best_perm, best_sum = None, -1
    for perm in itertools.permutations(range(n)):
        s = sum(padded[i, perm[i]] for i in range(n))
        if s > best_sum:
            best_sum, best_perm = s, perm
    return np.array(best_perm), best_sum


from oracles import cohen_kappa, entropy_nmi, pair_counting_ari


class TestSphericalKmeans:
    def test_antipodal_pair(self):
        z = np.array([[1.0, 0.0], [-1.0, 0.0]])
        labels, centroids, objective = spherical_kmeans(z, 2, np.random.default_rng(0))
        assert labels[0] != labels[1]
        assert abs(objective[-1] - 2.0) < 1e-12

    def test_identical_points_single_cluster(self):
        z = np.tile([[0.6, 0.8]], (5, 1))
        labels, centroids, _ = spherical_kmeans(z, 1, np.random.default_rng(1))
        assert (labels == 0).all()
        assert np.allclose(centroids[0], [0.6, 0.8], atol=1e-12)

    def test_three_bump_recovery_vs_multirestart_oracle(self):
        rng = np.random.default_rng(2)
        centers = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        pts = []
        for c in centers:
            chunk = c + 0.15 * rng.normal(size=(67, 3))
            pts.append(chunk / np.linalg.norm(chunk, axis=1, keepdims=True))
        z = np.vstack(pts)[:200]
        best = -np.inf
        for seed in range(20):
            _, _, obj = spherical_kmeans(z, 3, np.random.default_rng(100 + seed))
            best = max(best, obj[-1])
        _, _, obj_main = spherical_kmeans(z, 3, np.random.default_rng(3))
        # a single seeded run lands on (or within tolerance of) the best of 20 restarts
        assert obj_main[-1] >= best - 1e-9 or abs(obj_main[-1] - best) / best < 0.01

    def test_objective_monotone_on_random_instances(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            m = int(rng.integers(5, 40))
            f = int(rng.integers(2, 6))
            k = int(rng.integers(1, min(m, 6) + 1))
            z = rng.normal(size=(m, f))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            _, _, objective = spherical_kmeans(z, k, rng)
            diffs = np.diff(objective)
            assert (diffs >= -1e-9).all(), f"trial {trial}: objective decreased"

    def test_terminates_within_max_iter(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(100, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        _, _, objective = spherical_kmeans(z, 5, rng, max_iter=100)
        assert len(objective) <= 100

    def test_k_exceeds_m(self):
        with pytest.raises(ValueError):
            spherical_kmeans(np.eye(2), 3, np.random.default_rng(6))


class TestHungarianMap:
    def test_diagonal_matrix_identity(self):
        cm = ConfusionMatrix(np.diag([5, 3, 7]).astype(np.int64))
        assert np.array_equal(hungarian_map(cm), [0, 1, 2])

    def test_two_by_two_hand_case(self):
        cm = ConfusionMatrix(np.array([[5, 1], [2, 4]], dtype=np.int64))
        perm = hungarian_map(cm)
        assert np.array_equal(perm, [0, 1])
        mapped_correct = 5 + 4
        assert mapped_correct / 12 == 0.75

    def test_matches_brute_force_on_500_random(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            kp = int(rng.integers(1, 7))
            kt = int(rng.integers(1, 7))
            counts = rng.integers(0, 20, size=(kp, kt)).astype(np.int64)
            cm = ConfusionMatrix(counts)
            perm = hungarian_map(cm)
            oracle_perm, oracle_sum = brute_force_map(counts)
            n = perm.size
            padded = np.zeros((n, n), dtype=np.int64)
            padded[:kp, :kt] = counts
            assert sum(padded[i, perm[i]] for i in range(n)) == oracle_sum
            assert np.array_equal(perm, oracle_perm)

    def test_beats_greedy(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            counts = rng.integers(0, 30, size=(5, 5)).astype(np.int64)
            perm = hungarian_map(ConfusionMatrix(counts))
            opt = sum(counts[i, perm[i]] for i in range(5))
            # greedy: repeatedly take the largest remaining cell
            work = counts.astype(float).copy()
            greedy = 0
            for _ in range(5):
                i, j = np.unravel_index(np.argmax(work), work.shape)
                greedy += counts[i, j]
                work[i, :] = -1
                work[:, j] = -1
            assert opt >= greedy


class TestMetrics:
    def make_raster(self, true):
        true = np.asarray(true, dtype=np.int32)
        return LabelRaster(1, true.size, int(true.max()), true.reshape(1, -1))

    def test_perfect_clustering_all_ones(self):
        true = np.array([1, 1, 2, 2, 3, 3])
        pred = np.array([0, 0, 1, 1, 2, 2])
        report = compute_metrics(pred, self.make_raster(true), k=3)
        for name in ("acc", "kappa", "nmi", "ari", "precision", "recall", "f1", "purity"):
            assert getattr(report, name) == pytest.approx(1.0, abs=1e-12), name

    def test_single_cluster_balanced_two_class(self):
        true = np.array([1, 1, 2, 2])
        pred = np.zeros(4, dtype=int)
        report = compute_metrics(pred, self.make_raster(true), k=2)
        assert report.acc == pytest.approx(0.5)
        assert report.nmi == pytest.approx(0.0, abs=1e-12)
        assert report.ari == pytest.approx(0.0, abs=1e-12)
        assert report.kappa == pytest.approx(0.0, abs=1e-12)

    def test_against_independent_oracles(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            n = int(rng.integers(10, 60))
            k = int(rng.integers(2, 5))
            true = rng.integers(1, k + 1, size=n)
            true[:k] = np.arange(1, k + 1)  # every class present
            pred = rng.integers(0, k, size=n)
            report = compute_metrics(pred, self.make_raster(true), k=k)
            assert abs(report.ari - pair_counting_ari(pred.tolist(), true.tolist())) < 1e-10
            assert abs(report.nmi - entropy_nmi(pred.tolist(), true.tolist())) < 1e-10
            mapped = [report.mapping[p] + 1 for p in pred]
            assert abs(report.kappa - cohen_kappa(mapped, true.tolist())) < 1e-10
            acc_oracle = sum(mp == t for mp, t in zip(mapped, true)) / n
            assert abs(report.acc - acc_oracle) < 1e-12
            purity_oracle = 0
            for c in set(pred.tolist()):
                members = [t for p, t in zip(pred, true) if p == c]
                purity_oracle += max(members.count(v) for v in set(members))
            assert abs(report.purity - purity_oracle / n) < 1e-12

    def test_unlabeled_pixels_excluded(self):
        true = np.array([0, 0, 1, 2])
        pred = np.array([1, 1, 0, 1])
        report = compute_metrics(pred, self.make_raster(true), k=2)
        assert report.n_labeled == 2
        assert report.acc == 1.0  # both labeled pixels map correctly

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        n, k = 40, 4
        true = rng.integers(1, k + 1, size=n)
        true[:k] = np.arange(1, k + 1)
        pred = rng.integers(0, k, size=n)
        base = compute_metrics(pred, self.make_raster(true), k=k)
        relabel = rng.permutation(k)
        shuffled = relabel[pred]
        other = compute_metrics(shuffled, self.make_raster(true), k=k)
        for name in ("acc", "kappa", "nmi", "ari", "precision", "recall", "f1", "purity"):
            assert getattr(base, name) == pytest.approx(getattr(other, name), abs=1e-12)

    def test_macro_zero_division_contributes_zero(self):
        true = np.array([1, 1, 2])
        pred = np.array([0, 0, 0])  # cluster 1 never predicted
        report = compute_metrics(pred, self.make_raster(true), k=2)
        # class mapped to the unused cluster has precision 0 by convention
        assert 0.0 <= report.precision <= 1.0
        assert report.recall == pytest.approx((1.0 + 0.0) / 2)

    def test_no_labeled_pixels(self):
        with pytest.raises(NoLabeledPixels):
            compute_metrics(np.zeros(3, dtype=int),
                            LabelRaster(1, 3, 1, np.zeros((1, 3), dtype=np.int32)), k=1)

    def test_eval_gt_vs_gt_identity(self):
        true = np.array([1, 2, 3, 1, 2, 3, 1])
        pred = true - 1
        report = compute_metrics(pred, self.make_raster(true), k=3)
        assert report.acc == 1.0 and report.f1 == 1.0


class TestLabelsToPixels:
    def test_single_superpixel_constant(self):
        out = labels_to_pixels(np.array([7]), np.zeros((3, 3), dtype=int))
        assert np.array_equal(out, np.full((3, 3), 7))

    def test_identity_transfer(self):
        assignment = np.arange(6).reshape(2, 3)
        sp_labels = np.array([3, 1, 4, 1, 5, 9])
        out = labels_to_pixels(sp_labels, assignment)
        assert np.array_equal(out, sp_labels.reshape(2, 3))

    def test_count_conservation(self):
        rng = np.random.default_rng(11)
        assignment = rng.integers(0, 5, size=(8, 8))
        sp_labels = rng.integers(0, 3, size=5)
        out = labels_to_pixels(sp_labels, assignment)
        sizes = np.bincount(assignment.reshape(-1), minlength=5)
        for lab in range(3):
            expected = sizes[sp_labels == lab].sum()
            assert (out == lab).sum() == expected
