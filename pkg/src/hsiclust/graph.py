"""Superpixel spatial-adjacency graph with self-looped symmetric renormalization.

The edge support is frozen at construction: weight updates blend values on
the initial edges and never add or remove edges.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class WeightOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class SpGraph:
    """Undirected weighted graph over superpixels.

    `edges` holds each undirected pair once with u < v; `weights` are the
    current blended values in [0, 1]. The dense adjacency and its normalized
    form are derived on demand.
    """

    m: int
    edges: np.ndarray    # (E, 2) int64, u < v
    weights: np.ndarray  # (E,) float64 in [0, 1]

    def __post_init__(self):
        if self.edges.ndim != 2 or self.edges.shape[1] != 2:
            raise ValueError(f"edges must be (E, 2), got {self.edges.shape}")
        if self.weights.shape != (self.edges.shape[0],):
            raise ValueError("one weight per edge required")
        if self.edges.size and not (self.edges[:, 0] < self.edges[:, 1]).all():
            raise ValueError("edges must satisfy u < v")
        if self.weights.size and (self.weights.min() < 0.0 or self.weights.max() > 1.0):
            raise WeightOutOfRange("edge weights must lie in [0, 1]")

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.m, self.m))
        u, v = self.edges[:, 0], self.edges[:, 1]
        a[u, v] = self.weights
        a[v, u] = self.weights
        return a


def build_adjacency(assignment: np.ndarray) -> SpGraph:
    """Unit-weight adjacency: superpixels sharing a Manhattan-distance-1 pixel pair."""
    assignment = np.asarray(assignment)
    m = int(assignment.max()) + 1
    pairs = set()
    a, b = assignment[:, :-1].reshape(-1), assignment[:, 1:].reshape(-1)
    mask = a != b
    pairs.update(zip(np.minimum(a[mask], b[mask]).tolist(),
                     np.maximum(a[mask], b[mask]).tolist()))
    a, b = assignment[:-1, :].reshape(-1), assignment[1:, :].reshape(-1)
    mask = a != b
    pairs.update(zip(np.minimum(a[mask], b[mask]).tolist(),
                     np.maximum(a[mask], b[mask]).tolist()))
    if pairs:
        edges = np.array(sorted(pairs), dtype=np.int64)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return SpGraph(m, edges, np.ones(edges.shape[0]))


def normalize(graph: SpGraph) -> np.ndarray:
    """Self-looped symmetric renormalization of the current weights (dense)."""
    a_tilde = graph.dense_adjacency()
    np.fill_diagonal(a_tilde, a_tilde.diagonal() + 1.0)
    deg = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def momentum_update(graph: SpGraph, predicted: np.ndarray, gamma: float) -> SpGraph:
    """Blend current edge weights toward predicted ones: w <- gamma*w + (1-gamma)*pred."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != graph.weights.shape:
        raise ValueError(f"predicted weights shape {predicted.shape} vs edges {graph.weights.shape}")
    if predicted.size and (predicted.min() < 0.0 or predicted.max() > 1.0):
        raise WeightOutOfRange("predicted weights must lie in [0, 1]")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    blended = gamma * graph.weights + (1.0 - gamma) * predicted
    return SpGraph(graph.m, graph.edges, blended)


def delete_edges(graph: SpGraph, drop_mask: np.ndarray) -> SpGraph:
    """New graph without the flagged edges (diagnostic tool, not a weight update)."""
    keep = ~np.asarray(drop_mask, dtype=bool)
    return SpGraph(graph.m, graph.edges[keep], graph.weights[keep])


def dump_edges(path, graph: SpGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (u, v), w in zip(graph.edges.tolist(), graph.weights.tolist()):
            fh.write(json.dumps({"u": u, "v": v, "w": w}) + "\n")
