"""Margin-based class rebalancing for long-tailed labels.

Per class ``j`` with ``N_j`` training samples:

* margin ``m_j = log N_max - log N_j`` (zero for the largest class),
* weight ``w_j = log(N_max / N_j + eps) / div``, rescaled so the weights sum
  to the number of classes.

The loss perturbs each logit downward by ``eta |delta| m_j / max_k m_k`` with
``delta`` a clamped normal draw, subtracts ``margin_m`` from the target logit,
and takes the class-weighted cross-entropy averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import Node, Rng, Tape, clamped_normal


@dataclass
class RebalanceConfig:
    eta: float = 0.1
    sigma: float = 1.0
    margin_m: float = 0.4
    epsilon: float = 1.0  # 1e-6 leaves the largest class with weight ~1e-6
    div: float = 1.0

    def __post_init__(self):
        problems = []
        for name in ("eta", "sigma", "margin_m", "epsilon", "div"):
            if not math.isfinite(getattr(self, name)):
                problems.append(f"rebalance.{name} must be finite")
        if self.eta < 0:
            problems.append("rebalance.eta must be >= 0")
        if self.sigma < 0:
            problems.append("rebalance.sigma must be >= 0")
        if self.margin_m < 0:
            problems.append("rebalance.margin_m must be >= 0")
        if not self.epsilon > 0:
            problems.append("rebalance.epsilon must be > 0")
        if not self.div > 0:
            problems.append("rebalance.div must be > 0")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray
    margins: np.ndarray
    weights: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.size


def compute_class_stats(counts: Sequence[int], cfg: Optional[RebalanceConfig] = None) -> ClassStats:
    cfg = cfg or RebalanceConfig()
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or n.size < 1:
        raise DomainError("counts must be a nonempty vector")
    if np.any(n < 1):
        raise DomainError(f"every class needs at least one sample, got counts {list(counts)}")
    n_max = n.max()
    margins = np.log(n_max) - np.log(n)
    raw = np.log(n_max / n + cfg.epsilon) / cfg.div
    weights = raw * (n.size / raw.sum())
    return ClassStats(n, margins, weights)


def balanced_stats(num_classes: int) -> ClassStats:
    """Stats that turn the loss into plain cross-entropy (zero margins, unit weights)."""
    return ClassStats(np.ones(num_classes), np.zeros(num_classes), np.ones(num_classes))


def logit_offsets(labels, stats: ClassStats, cfg: RebalanceConfig, rng: Optional[Rng]) -> np.ndarray:
    """Constant additive offsets: class-scaled noise plus the target margin.

    One clamped-normal draw per sample and class. No draws are taken when the
    noise term vanishes (``eta == 0`` or all margins zero).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = labels.size, stats.num_classes
    offsets = np.zeros((n, k))
    top = float(stats.margins.max())
    if cfg.eta > 0 and top > 0:
        if rng is None:
            raise ValueError("an Rng is required when noise is enabled")
        delta = clamped_normal(rng, cfg.sigma, (n, k))
        offsets -= cfg.eta * np.abs(delta) * (stats.margins / top)[None, :]
    offsets[np.arange(n), labels] -= cfg.margin_m
    return offsets


def rebalanced_loss(tape: Tape, logits: Node, labels, stats: ClassStats, cfg: RebalanceConfig,
                    rng: Optional[Rng] = None, offsets: Optional[np.ndarray] = None) -> Node:
    """Record the rebalanced loss on ``tape`` and return its scalar node.

    Pass ``offsets`` to reuse frozen noise instead of drawing from ``rng``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = stats.num_classes
    if logits.value.shape[1] != k:
        raise DomainError(f"logits have {logits.value.shape[1]} classes, stats have {k}")
    if labels.size == 0:
        raise DomainError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError(f"labels must lie in [0, {k})")
    if offsets is None:
        offsets = logit_offsets(labels, stats, cfg, rng)
    return tape.margin_cross_entropy(logits, labels, offsets, stats.weights[labels])


def plain_loss(tape: Tape, logits: Node, labels) -> Node:
    return tape.margin_cross_entropy(logits, labels)
