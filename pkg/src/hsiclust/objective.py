"""Contrastive clustering objectives: neighborhood alignment between predictor
outputs on noise-perturbed embeddings and target views, prototype construction
from cluster sums, the prototype softmax contrast, and the weighted total.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

log = logging.getLogger(__name__)


class EmptyCluster(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Weights and scales of the composite objective."""

    alpha: float = 0.1    # prototype contrast weight
    beta: float = 0.01    # edge loss weight
    sigma: float = 1e-3   # neighborhood noise margin
    tau: float = 0.7      # contrast temperature

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class ClusterState:
    """Evaluation-mode clustering snapshot shared by the edge module and trainer."""

    assignments: np.ndarray   # (M,) hard cluster ids in 0..K-1
    prototypes: np.ndarray    # (K, F) unit rows from target embeddings
    confidence: np.ndarray    # (M,) max cosine to any prototype

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]


def neighborhood_alignment_loss(online_out: Tensor, targets: np.ndarray,
                                predictor, sigma: float,
                                rng: np.random.Generator,
                                normalize: bool = False) -> Tensor:
    """Mean squared distance between g(f(x) + sigma*eps) and the target views.

    `targets` are detached target-network outputs; noise is sampled fresh per
    call from the run's stream, and gradients reach only f and g.

    With `normalize=True` both sides are row-normalized before the distance,
    bounding the loss to [0, 4] per sample. The raw form has curvature
    proportional to the predictor's hidden width, which makes plain SGD at the
    reference learning rate diverge, so the trainer uses the normalized form.
    """
    targets = np.asarray(targets, dtype=np.float64)
    m = online_out.shape[0]
    if sigma > 0:
        eps = rng.standard_normal(size=online_out.shape)
        v = nm.add(online_out, Tensor(sigma * eps))
    else:
        v = online_out
    g_out = predictor(v)
    if normalize:
        g_out = nm.l2_normalize_rows(g_out)
        targets = targets / np.maximum(np.linalg.norm(targets, axis=1, keepdims=True), 1e-12)
    diff = nm.sub(g_out, Tensor(targets))
    return nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / m)


def cluster_indicator(assignments: np.ndarray, k: int) -> np.ndarray:
    """(K, M) membership matrix; raises when a referenced cluster is empty."""
    assignments = np.asarray(assignments)
    counts = np.bincount(assignments, minlength=k)
    if (counts == 0).any():
        raise EmptyCluster(f"clusters with no members: {np.flatnonzero(counts == 0).tolist()}")
    ind = np.zeros((k, assignments.size))
    ind[assignments, np.arange(assignments.size)] = 1.0
    return ind


def build_prototypes(online_out: Tensor, target_aug: np.ndarray,
                     assignments: np.ndarray, k: int) -> tuple[Tensor, np.ndarray]:
    """Two prototype views: normalized cluster sums of online and target-view
    embeddings. The online view stays on the tape; the target view is detached.
    """
    ind = cluster_indicator(assignments, k)
    sums = nm.matmul(Tensor(ind), online_out)
    norms = np.linalg.norm(sums.value, axis=1)
    if (norms < 1e-9).any():
        log.warning("degenerate prototype: near-zero cluster sum in clusters %s",
                    np.flatnonzero(norms < 1e-9).tolist())
    mu = nm.l2_normalize_rows(sums)

    target_sums = ind @ np.asarray(target_aug, dtype=np.float64)
    t_norms = np.linalg.norm(target_sums, axis=1, keepdims=True)
    mu_plus = target_sums / np.maximum(t_norms, 1e-12)
    return mu, mu_plus


def prototype_contrast_loss(mu: Tensor, mu_plus: np.ndarray, tau: float) -> Tensor:
    """Softmax contrast over prototype pairs at temperature tau."""
    mu_plus = np.asarray(mu_plus, dtype=np.float64)
    k = mu.shape[0]
    logits = nm.scale(nm.matmul(mu, Tensor(mu_plus.T)), 1.0 / tau)
    lse = nm.logsumexp_rows(logits)
    aligned = nm.diag_part(logits)
    return nm.scale(nm.sum_all(nm.sub(lse, aligned)), 1.0 / k)


def total_loss(l_na: Tensor, l_pc: Tensor | None, l_e: Tensor | None,
               alpha: float, beta: float) -> Tensor:
    """L = L_NA + alpha * L_PC + beta * L_E (absent terms contribute nothing)."""
    out = l_na
    if l_pc is not None and alpha != 0.0:
        out = nm.add(out, nm.scale(l_pc, alpha))
    if l_e is not None and beta != 0.0:
        out = nm.add(out, nm.scale(l_e, beta))
    return out
