"""Spherical k-means, optimal cluster-to-class mapping and the clustering
metric suite (accuracy, kappa, NMI, ARI, macro precision/recall/F1, purity),
restricted to ground-truth-labeled pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .hsi_io import LabelRaster


class NoLabeledPixels(ValueError):
    pass


def spherical_kmeans(z: np.ndarray, k: int, rng: np.random.Generator,
                     max_iter: int = 100, tol: float = 1e-6, n_init: int = 1,
                     init_centroids: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Cosine k-means on unit rows; returns (labels, centroids, objective trace).

    Init is k-means++-style with squared cosine distance; the assignment step
    maximizes the dot product, the update step re-normalizes cluster means, and
    an emptied cluster is reseeded to the point least similar to its centroid.
    The objective sum_i z_i . c_{a(i)} never decreases across iterations.
    With n_init > 1 the best of several restarts (by final objective) wins;
    `init_centroids` adds one extra warm-started candidate to the pool.
    """
    if n_init > 1 or init_centroids is not None:
        best = None
        starts: list[np.ndarray | None] = [None] * max(1, n_init)
        if init_centroids is not None:
            starts.append(np.asarray(init_centroids, dtype=np.float64))
        for start in starts:
            cand = spherical_kmeans(z, k, rng, max_iter, tol, n_init=1,
                                    init_centroids=None) if start is None else \
                _spherical_kmeans_from(z, k, start, max_iter, tol)
            if best is None or cand[2][-1] > best[2][-1]:
                best = cand
        return best
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds sample count {m}")

    centroids = np.empty((k, z.shape[1]))
    first = int(rng.integers(0, m))
    centroids[0] = z[first]
    if k > 1:
        d2 = (1.0 - z @ centroids[0]) ** 2
        for j in range(1, k):
            total = d2.sum()
            if total <= 0:
                idx = int(rng.integers(0, m))
            else:
                idx = int(rng.choice(m, p=d2 / total))
            centroids[j] = z[idx]
            d2 = np.minimum(d2, (1.0 - z @ centroids[j]) ** 2)

    return _spherical_kmeans_from(z, k, centroids, max_iter, tol)


def _spherical_kmeans_from(z: np.ndarray, k: int, centroids: np.ndarray,
                           max_iter: int, tol: float
                           ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    m = z.shape[0]
    centroids = np.array(centroids, dtype=np.float64)
    labels = np.zeros(m, dtype=np.int64)
    objective: list[float] = []
    for _ in range(max_iter):
        sims = z @ centroids.T
        labels = np.argmax(sims, axis=1)
        objective.append(float(sims[np.arange(m), labels].sum()))
        if len(objective) > 1 and objective[-1] - objective[-2] < tol:
            break
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own_sim = sims[np.arange(m), labels]
            worst = int(np.argmin(own_sim))
            centroids[j] = z[worst]
            labels[worst] = j
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, z)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        nonzero = norms[:, 0] > 1e-12
        centroids[nonzero] = sums[nonzero] / norms[nonzero]
    return labels, centroids, objective


@dataclass(frozen=True)
class ConfusionMatrix:
    """Predicted-cluster x true-class counts over labeled pixels only."""

    counts: np.ndarray  # (K_pred, K_true) int64

    def __post_init__(self):
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_from_labels(pred: np.ndarray, true: np.ndarray,
                          k_pred: int, k_true: int) -> ConfusionMatrix:
    """Build a confusion matrix from 0-based predicted and 1-based true labels,
    keeping only the pixels with true label > 0."""
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    mask = true > 0
    if not mask.any():
        raise NoLabeledPixels("ground truth contains no labeled pixels")
    counts = np.zeros((k_pred, k_true), dtype=np.int64)
    np.add.at(counts, (pred[mask], true[mask] - 1), 1)
    return ConfusionMatrix(counts)


def _optimal_diagonal_sum(counts: np.ndarray) -> int:
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return int(counts[rows, cols].sum())


def hungarian_map(cm: ConfusionMatrix) -> np.ndarray:
    """Permutation maximizing the mapped diagonal sum.

    Entry p[i] is the class column assigned to predicted row i on the
    zero-padded square matrix. Among equally optimal assignments the
    lexicographically smallest permutation is returned, fixing rows greedily
    and verifying each candidate column still attains the optimum.
    """
    counts = cm.counts
    n = max(counts.shape)
    padded = np.zeros((n, n), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts
    best_total = _optimal_diagonal_sum(padded)

    perm = np.full(n, -1, dtype=np.int64)
    free_cols = list(range(n))
    fixed_sum = 0
    for row in range(n):
        remaining_rows = list(range(row + 1, n))
        for col in sorted(free_cols):
            rest = padded[np.ix_(remaining_rows, [c for c in free_cols if c != col])] \
                if remaining_rows else np.zeros((0, 0), dtype=np.int64)
            rest_sum = _optimal_diagonal_sum(rest) if rest.size else 0
            if fixed_sum + padded[row, col] + rest_sum == best_total:
                perm[row] = col
                fixed_sum += padded[row, col]
                free_cols.remove(col)
                break
    return perm


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    kappa: float
    nmi: float
    ari: float
    precision: float
    recall: float
    f1: float
    purity: float
    n_labeled: int
    mapping: tuple[int, ...]

    def __post_init__(self):
        for name in ("acc", "nmi", "precision", "recall", "f1", "purity"):
            v = getattr(self, name)
            if not -1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("kappa", "ari"):
            v = getattr(self, name)
            if not -1 - 1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "acc": self.acc, "kappa": self.kappa, "nmi": self.nmi, "ari": self.ari,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "purity": self.purity, "n_labeled": self.n_labeled,
            "mapping": list(self.mapping),
            "nmi_normalization": "arithmetic",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _nmi(counts: np.ndarray) -> float:
    """Mutual information with arithmetic-mean normalization."""
    n = counts.sum()
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    h_u, h_v = _entropy(rows), _entropy(cols)
    if h_u + h_v == 0.0:
        return 1.0  # both partitions trivial and identical
    mi = 0.0
    nz = np.nonzero(counts)
    for i, j in zip(*nz):
        nij = counts[i, j]
        mi += (nij / n) * np.log(n * nij / (rows[i] * cols[j]))
    return float(max(0.0, min(1.0, 2.0 * mi / (h_u + h_v))))


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def _ari(counts: np.ndarray) -> float:
    n = counts.sum()
    sum_ij = _comb2(counts.astype(np.float64)).sum()
    a = _comb2(counts.sum(axis=1).astype(np.float64)).sum()
    b = _comb2(counts.sum(axis=0).astype(np.float64)).sum()
    total = _comb2(np.float64(n))
    expected = a * b / total if total > 0 else 0.0
    denom = 0.5 * (a + b) - expected
    if denom == 0.0:
        return 1.0 if sum_ij == expected else 0.0
    return float((sum_ij - expected) / denom)


def compute_metrics(pred_labels: np.ndarray, gt: LabelRaster, k: int | None = None) -> MetricsReport:
    """Eight clustering metrics on labeled pixels, after optimal mapping.

    `pred_labels` holds 0-based cluster ids per pixel; unlabeled pixels
    (gt label 0) are excluded everywhere. Macro precision/recall/F1 average
    over ground-truth classes, counting classes missing from the prediction
    as zero.
    """
    pred = np.asarray(pred_labels).reshape(-1)
    true = np.asarray(gt.labels).reshape(-1)
    k_true = gt.classes
    k_pred = k if k is not None else max(int(pred.max()) + 1, k_true)
    cm = confusion_from_labels(pred, true, k_pred, k_true)
    n = cm.total

    perm = hungarian_map(cm)
    n_sq = perm.size
    padded = np.zeros((n_sq, n_sq), dtype=np.int64)
    padded[: cm.counts.shape[0], : cm.counts.shape[1]] = cm.counts
    mapped = padded[np.argsort(perm), :]  # row i of `mapped` = predictions mapped to class i

    diag = np.diagonal(mapped)
    acc = float(diag.sum() / n)

    p_o = acc
    p_e = float((mapped.sum(axis=1) * mapped.sum(axis=0)).sum() / (n * n))
    kappa = 0.0 if p_e == 1.0 else float((p_o - p_e) / (1.0 - p_e))

    nmi = _nmi(cm.counts)
    ari = _ari(cm.counts)

    precisions, recalls, f1s = [], [], []
    for j in range(k_true):
        tp = mapped[j, j]
        pred_j = mapped[j, :].sum()
        true_j = mapped[:, j].sum()
        p = tp / pred_j if pred_j else 0.0
        r = tp / true_j if true_j else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if (p + r) else 0.0)
    precision = float(np.mean(precisions))
    recall = float(np.mean(recalls))
    f1 = float(np.mean(f1s))

    purity = float(cm.counts.max(axis=1).sum() / n)

    return MetricsReport(acc, kappa, nmi, ari, precision, recall, f1, purity,
                         n, tuple(int(c) for c in perm))


def labels_to_pixels(sp_labels: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Transfer per-superpixel labels to pixels through the assignment raster."""
    sp_labels = np.asarray(sp_labels)
    return sp_labels[np.asarray(assignment)]
