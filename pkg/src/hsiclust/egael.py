"""Evidence-guided edge learning: per-edge features from soft assignments, a
sigmoid-headed two-layer MLP predicting edge weights, heuristic empirical
weights from clustering confidence and node similarity, and the audit tooling
for edge quality.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .graph import SpGraph, delete_edges
from .numerics import ParamSet, Tensor


class NotNormalized(ValueError):
    pass


class NoLabeledEdges(ValueError):
    pass


def _check_unit_rows(name, rows, tol=1e-9):
    norms = np.linalg.norm(rows, axis=1)
    if np.max(np.abs(norms - 1.0)) > tol:
        raise NotNormalized(f"{name} rows are not unit-norm (max dev "
                            f"{np.max(np.abs(norms - 1.0)):.2e})")


def soft_assignments(embeddings: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity of each node to each prototype (both unit-norm)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    _check_unit_rows("embeddings", embeddings)
    _check_unit_rows("prototypes", prototypes)
    return embeddings @ prototypes.T


def confidence(assignments: np.ndarray) -> np.ndarray:
    """Best prototype similarity per node."""
    return np.asarray(assignments).max(axis=1)


def init_edge_mlp(k: int, rng: np.random.Generator, prefix: str = "h.") -> ParamSet:
    """Two-layer MLP on concatenated endpoint assignments: 2K -> K -> 1."""
    ps = ParamSet()
    bound1 = np.sqrt(1.0 / (2 * k))
    ps.add(f"{prefix}w1", rng.uniform(-bound1, bound1, size=(2 * k, k)))
    ps.add(f"{prefix}b1", np.zeros(k))
    bound2 = np.sqrt(1.0 / k)
    ps.add(f"{prefix}w2", rng.uniform(-bound2, bound2, size=(k, 1)))
    ps.add(f"{prefix}b2", np.zeros(1))
    return ps


def _edge_mlp_forward(params: ParamSet, feats: Tensor, prefix: str) -> Tensor:
    h = nm.add(nm.affine(feats, params[f"{prefix}w1"]), params[f"{prefix}b1"])
    h = nm.relu(h)
    return nm.add(nm.affine(h, params[f"{prefix}w2"]), params[f"{prefix}b2"])


def predict_edge_weights(params: ParamSet, assignments: np.ndarray,
                         edges: np.ndarray, prefix: str = "h.") -> Tensor:
    """Per-edge weight in (0,1), symmetrized over both endpoint orderings.

    The concatenation [z_u || z_v] is order-sensitive, so the sigmoid outputs
    for both orderings are averaged to keep the adjacency update symmetric.
    """
    assignments = np.asarray(assignments, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64)
    u, v = edges[:, 0], edges[:, 1]
    uv = Tensor(np.concatenate([assignments[u], assignments[v]], axis=1))
    vu = Tensor(np.concatenate([assignments[v], assignments[u]], axis=1))
    w_uv = nm.sigmoid(_edge_mlp_forward(params, uv, prefix))
    w_vu = nm.sigmoid(_edge_mlp_forward(params, vu, prefix))
    half_sum = nm.scale(nm.add(w_uv, w_vu), 0.5)
    return nm.reshape(half_sum, (edges.shape[0],))


def _minmax01(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo == 0.0:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def empirical_edge_weights(conf: np.ndarray, embeddings: np.ndarray,
                           hard_labels: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Heuristic edge reliability from confidence, similarity and co-assignment.

    Confidences are min-max normalized across nodes, similarities across edges;
    for differently-assigned endpoints the normalized similarity is flipped.
    Treated as detached evidence: no gradient flows through it.
    """
    conf = np.asarray(conf, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    hard_labels = np.asarray(hard_labels)
    edges = np.asarray(edges, dtype=np.int64)
    u, v = edges[:, 0], edges[:, 1]

    sim = (embeddings[u] * embeddings[v]).sum(axis=1)
    conf_n = _minmax01(conf) if conf.size else conf
    sim_n = _minmax01(sim) if sim.size else sim
    ind = (hard_labels[u] == hard_labels[v]).astype(np.float64)
    sim_eff = np.where(ind == 1.0, sim_n, 1.0 - sim_n)
    raw = (2.0 * ind - 1.0) * conf_n[u] * conf_n[v] * sim_eff
    return nm.sigmoid_value(raw)


def edge_loss(w_pre: Tensor, w_emp: np.ndarray) -> Tensor:
    """Mean squared gap between predicted and empirical weights (evidence fixed)."""
    w_emp = np.asarray(w_emp, dtype=np.float64)
    if w_pre.shape != w_emp.shape:
        raise ValueError(f"length mismatch: {w_pre.shape} vs {w_emp.shape}")
    diff = nm.sub(w_pre, Tensor(w_emp))
    return nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / max(1, w_emp.size))


@dataclass
class EdgeAuditReport:
    """Threshold sweep of predicted weights against ground-truth edge labels."""

    n_edges: int
    n_correct: int
    baseline_accuracy: float          # declare every edge correct
    best_threshold: float
    best_accuracy: float
    best_balanced_accuracy: float
    thresholds: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    balanced_accuracies: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def edge_ground_truth(sp_labels: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(usable mask, correctness) per edge; an edge is usable when both
    endpoints carry a ground-truth label."""
    sp_labels = np.asarray(sp_labels)
    u, v = edges[:, 0], edges[:, 1]
    usable = (sp_labels[u] > 0) & (sp_labels[v] > 0)
    correct = usable & (sp_labels[u] == sp_labels[v])
    return usable, correct


def edge_audit(w_pre: np.ndarray, sp_labels: np.ndarray, edges: np.ndarray) -> EdgeAuditReport:
    """Sweep thresholds on w_pre classifying edges as correct (w >= t).

    The sweep always includes a threshold below min(w_pre), whose prediction
    (all edges correct) is the baseline row.
    """
    w_pre = np.asarray(w_pre, dtype=np.float64)
    usable, correct = edge_ground_truth(sp_labels, np.asarray(edges, dtype=np.int64))
    if not usable.any():
        raise NoLabeledEdges("no edge has ground-truth labels on both endpoints")
    w = w_pre[usable]
    y = correct[usable]
    n = y.size
    n_pos = int(y.sum())
    n_neg = n - n_pos

    thresholds = [float(w.min()) - 1.0] + sorted(set(w.tolist()))
    accs, baccs = [], []
    for t in thresholds:
        pred = w >= t
        acc = float((pred == y).mean())
        tpr = float((pred & y).sum() / n_pos) if n_pos else 1.0
        tnr = float((~pred & ~y).sum() / n_neg) if n_neg else 1.0
        accs.append(acc)
        baccs.append(0.5 * (tpr + tnr))
    best_i = int(np.argmax(accs))
    return EdgeAuditReport(
        n_edges=n,
        n_correct=n_pos,
        baseline_accuracy=accs[0],
        best_threshold=thresholds[best_i],
        best_accuracy=accs[best_i],
        best_balanced_accuracy=max(baccs),
        thresholds=thresholds,
        accuracies=accs,
        balanced_accuracies=baccs,
    )


def edge_deletion_sweep(graph: SpGraph, sp_labels: np.ndarray, ratios,
                        rng: np.random.Generator) -> list[tuple[float, SpGraph]]:
    """For each ratio r, a graph copy with ceil(r * n_incorrect) incorrect
    edges removed uniformly at random."""
    usable, correct = edge_ground_truth(sp_labels, graph.edges)
    incorrect_idx = np.flatnonzero(usable & ~correct)
    out = []
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"deletion ratio {r} outside [0, 1]")
        n_drop = int(np.ceil(r * incorrect_idx.size))
        drop = rng.choice(incorrect_idx, size=n_drop, replace=False) if n_drop else []
        mask = np.zeros(graph.n_edges, dtype=bool)
        mask[drop] = True
        out.append((float(r), delete_edges(graph, mask)))
    return out
