"""Task loss, the two same-instance contrastive regularisers, and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

REDUCTIONS = ("mean", "sum")


@dataclass
class LossBreakdown:
    task: float
    shared: float
    sim: float
    total: float
    lam: float
    tau: float
    prox: float = 0.0


@dataclass
class SimilaritySpace:
    """A cosine-similarity matrix together with its positive-pair structure."""

    matrix: Tensor
    positives: np.ndarray  # (R, R) bool
    instance: np.ndarray
    modality: np.ndarray
    is_embedding: np.ndarray
    skipped_anchors: int = field(default=0)


def same_instance_positives(instance: np.ndarray, is_embedding: np.ndarray) -> np.ndarray:
    """positives[a, p]: same instance, a != p, neither row an embedding pseudo-row."""
    instance = np.asarray(instance)
    real = ~np.asarray(is_embedding, dtype=bool)
    pos = (instance[:, None] == instance[None, :]) & real[:, None] & real[None, :]
    np.fill_diagonal(pos, False)
    return pos


def similarity_space(matrix: Tensor, instance, modality, is_embedding) -> SimilaritySpace:
    is_embedding = np.asarray(is_embedding, dtype=bool)
    pos = same_instance_positives(instance, is_embedding)
    skipped = int(np.sum(~is_embedding & ~pos.any(axis=1)))
    return SimilaritySpace(matrix, pos, np.asarray(instance), np.asarray(modality), is_embedding, skipped)


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy."""
    return ad.cross_entropy(logits, labels)


def contrastive(space: SimilaritySpace, tau: float = 1.0, reduction: str = "mean") -> Tensor:
    """InfoNCE over same-instance positives.

    For anchor a and positive p the term is
    ``-log(exp(R[a,p]/tau) / sum_{s != a} exp(R[a,s]/tau))``; embedding rows only
    appear in denominators. ``reduction="mean"`` averages over
    (anchor, positive) pairs, ``"sum"`` returns the raw double sum.
    """
    if tau <= 0:
        raise ContractError(f"contrastive: tau must be positive, got {tau}")
    if reduction not in REDUCTIONS:
        raise ContractError(f"contrastive: unknown reduction {reduction!r}")
    R = space.matrix
    n = R.shape[0]
    anchors, partners = np.nonzero(space.positives)
    if len(anchors) == 0 or n < 2:
        return ad.Tensor(0.0)
    # row a of probs is softmax_{s != a}(R[a, s] / tau); each pair contributes -log probs[a, p]
    probs = ad.softmax(R, tau, exclude=np.eye(n, dtype=bool))
    total = -ad.sum_(ad.log(probs[anchors, partners]))
    if reduction == "mean":
        total = total * (1.0 / len(anchors))
    return total


def contrastive_shared(space: SimilaritySpace, tau: float = 1.0, reduction: str = "mean") -> Tensor:
    return contrastive(space, tau, reduction)


def contrastive_sim(space: SimilaritySpace, tau: float = 1.0, reduction: str = "mean") -> Tensor:
    return contrastive(space, tau, reduction)


def default_lambda(p_m: float, p_s: float) -> float:
    """0.1 when the missing degree p_m*p_s is at most 0.5, else 0.2."""
    return 0.1 if p_m * p_s <= 0.5 else 0.2


def combine(task: float, shared: float, sim: float, lam: float, tau: float = 1.0) -> LossBreakdown:
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return LossBreakdown(task, shared, sim, task + lam * (shared + sim), lam, tau)


def total_loss(task: Tensor, shared: Optional[Tensor], sim: Optional[Tensor], lam: float) -> Tensor:
    """Differentiable ``task + lam * (shared + sim)``; absent terms count as 0."""
    if lam == 0 or (shared is None and sim is None):
        return task
    reg = None
    for term in (shared, sim):
        if term is not None:
            reg = term if reg is None else reg + term
    return task + reg * lam
