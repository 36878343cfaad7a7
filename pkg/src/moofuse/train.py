"""Multi-objective training loop in synchronous and asynchronous modes.

Each step runs every available modality through its own stream, takes that
modality's loss and gradients, moves the shared backbone along the
conflict-averse direction and updates private encoders and heads with their
own gradients only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import (
    AlignedTable,
    Dataset,
    Fold,
    SegmentTable,
    aligned_table,
    oversample_modality_balanced,
    segment_table,
)
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import ModelParams, ModelSpec, forward, init_params, partition_gradients, unflatten_backbone
from .moo import Direction, FlatGradient, MooConfig, SimplexWeights, conflict_averse_direction
from .numerics import Rng, backward
from .rebalance import ClassStats, RebalanceConfig, balanced_stats, compute_class_stats, rebalanced_loss

log = logging.getLogger(__name__)

MODES = ("sync", "async")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    mode: str = "async"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"  # private groups
    backbone_optimizer: str = "sgd"  # sgd applies d directly: phi <- phi - lr * d
    moo: MooConfig = field(default_factory=MooConfig)
    moo_enabled: bool = True
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    rebalance_enabled: bool = True
    early_stop: bool = False
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.moo, dict):
            self.moo = MooConfig(**self.moo)
        if isinstance(self.rebalance, dict):
            self.rebalance = RebalanceConfig(**self.rebalance)
        problems = []
        if self.mode not in MODES:
            problems.append(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.epochs <= 100:
            problems.append("train.epochs must lie in [0, 100]")
        if self.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            problems.append("train.learning_rate must be > 0")
        for key in ("optimizer", "backbone_optimizer"):
            if getattr(self, key) not in OPTIMIZERS:
                problems.append(f"train.{key} must be one of {OPTIMIZERS}")
        if self.patience < 1:
            problems.append("train.patience must be >= 1")
        if problems:
            raise ConfigError(problems)

    def effective_moo(self) -> MooConfig:
        if self.moo_enabled:
            return self.moo
        return MooConfig(**{**asdict(self.moo), "beta": 0.0})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return value - self.lr * grad


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.state: Dict[str, list] = {}

    def step(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        m, v, t = self.state.get(name, (np.zeros_like(value), np.zeros_like(value), 0))
        t += 1
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        self.state[name] = (m, v, t)
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        return value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else SGD(lr)


@dataclass
class Optimizers:
    private: object
    backbone: object

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Optimizers":
        return cls(make_optimizer(cfg.optimizer, cfg.learning_rate),
                   make_optimizer(cfg.backbone_optimizer, cfg.learning_rate))


# ---------------------------------------------------------------------------
# one step


@dataclass
class ModalityBatch:
    modality: int
    features: np.ndarray
    labels: np.ndarray
    subjects: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size or self.labels.size == 0:
            raise ContractError("batch needs one label per feature row and at least one row")


@dataclass
class StepResult:
    params: ModelParams
    losses: Dict[int, float]
    direction: FlatGradient
    backbone_grads: Dict[int, FlatGradient]
    weights: Optional[SimplexWeights] = None


def modality_loss(params: ModelParams, batch: ModalityBatch, cfg: TrainConfig,
                  stats: Optional[ClassStats], rng: Optional[Rng]):
    """Forward, loss and reverse sweep for one modality batch."""
    fr = forward(params, batch.modality, batch.features)
    if cfg.rebalance_enabled:
        if stats is None:
            raise ContractError("rebalancing needs class stats")
        loss = rebalanced_loss(fr.tape, fr.node, batch.labels, stats, cfg.rebalance, rng)
    else:
        loss = rebalanced_loss(fr.tape, fr.node, batch.labels, balanced_stats(params.spec.num_classes),
                               RebalanceConfig(eta=0.0, margin_m=0.0))
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss for modality {batch.modality}")
    grads = backward(fr.tape, loss)
    return value, partition_gradients(grads, params, batch.modality)


def trip_step(params: ModelParams, batches: Sequence[ModalityBatch], cfg: TrainConfig,
              optimizers: Optional[Optimizers] = None, stats: Optional[Dict[int, ClassStats]] = None,
              rng: Optional[Rng] = None) -> StepResult:
    """One update from one batch per available modality.

    Returns new parameters; ``params`` is left untouched. Optimiser state in
    ``optimizers`` (Adam moments) is advanced in place.
    """
    if not batches:
        raise ContractError("trip_step needs at least one modality batch")
    batches = sorted(batches, key=lambda b: b.modality)
    if len({b.modality for b in batches}) != len(batches):
        raise ContractError("at most one batch per modality")
    optimizers = optimizers or Optimizers.from_config(cfg)
    stats = stats or {}

    losses, parts = {}, []
    for b in batches:
        value, part = modality_loss(params, b, cfg, stats.get(b.modality), rng)
        losses[b.modality] = value
        parts.append(part)

    grads = [p.backbone for p in parts]
    weights = None
    if len(grads) == 1:
        d = grads[0]
    else:
        res: Direction = conflict_averse_direction(grads, cfg.effective_moo())
        d, weights = res.direction, res.weights

    new = params.copy()
    keys = params.backbone_keys()
    for key, g in unflatten_backbone(d, params.backbone, keys).items():
        new.backbone[key] = optimizers.backbone.step(f"backbone.{key}", params.backbone[key], g)
    for p in parts:
        for key, g in p.encoder.items():
            name = f"enc{p.modality}.{key}"
            new.set(name, optimizers.private.step(name, params.get(name), g))
    if params.spec.head_mode == "shared":
        # the shared head sees every stream; average its gradients across them
        for key in parts[0].head:
            g = np.mean([p.head[key] for p in parts], axis=0)
            new.set(f"head.{key}", optimizers.private.step(f"head.{key}", params.get(f"head.{key}"), g))
    else:
        for p in parts:
            for key, g in p.head.items():
                name = f"head{p.modality}.{key}"
                new.set(name, optimizers.private.step(name, params.get(name), g))
    return StepResult(new, losses, d, {p.modality: p.backbone for p in parts}, weights)


# ---------------------------------------------------------------------------
# epochs


@dataclass
class TrainResult:
    params: ModelParams
    trace: List[tuple] = field(default_factory=list)  # (epoch, modality name, mean loss)
    epochs_run: int = 0
    initial: Optional[ModelParams] = None


def default_model_spec(dataset: Dataset, cfg: TrainConfig, **overrides) -> ModelSpec:
    head_mode = "shared" if cfg.mode == "sync" else "per-modality"
    kw = {"modality_dims": list(dataset.modality_dims), "num_classes": dataset.num_classes, "head_mode": head_mode}
    kw.update(overrides)
    return ModelSpec(**kw)


def _stats_for(labels: np.ndarray, num_classes: int, cfg: TrainConfig, what: str) -> ClassStats:
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise DataError(f"{what}: classes {missing} have no training segments")
    return compute_class_stats(counts, cfg.rebalance)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def train(dataset: Dataset, fold: Fold, cfg: TrainConfig, model_spec: Optional[ModelSpec] = None,
          modalities: Optional[Sequence[int]] = None) -> TrainResult:
    """Train on ``fold.train_subjects``.

    ``modalities`` restricts training to a subset of streams (a single entry
    gives the single-modality reference model with the same architecture).
    """
    spec = model_spec or default_model_spec(dataset, cfg)
    if cfg.mode == "async" and spec.head_mode == "shared":
        raise ConfigError("a shared head is only allowed in synchronous training")
    active = list(range(dataset.num_modalities)) if modalities is None else sorted(modalities)
    if not active:
        raise ConfigError("at least one modality must be trained")

    params = init_params(spec, Rng.stream(cfg.seed, "init"))
    initial = params.copy()
    sampling = Rng.stream(cfg.seed, "sampling")
    noise = Rng.stream(cfg.seed, "noise")
    optimizers = Optimizers.from_config(cfg)
    K = dataset.num_classes

    if cfg.mode == "async":
        tables = [segment_table(dataset, r, fold.train_subjects) for r in active]
        pools = oversample_modality_balanced(tables, Rng.stream(cfg.seed, "oversample"))
        stats = {r: _stats_for(t.labels[p], K, cfg, dataset.modality_names[r]) for r, t, p in zip(active, tables, pools)}
        pool_size = pools[0].size
    else:
        aligned: AlignedTable = aligned_table(dataset, fold.train_subjects)
        if len(aligned) == 0:
            raise DataError("no complete training subjects for synchronous training")
        shared = _stats_for(aligned.labels, K, cfg, "aligned training set")
        stats = {r: shared for r in active}
        pool_size = len(aligned)

    trace = []
    best, stale, epochs_run = math.inf, 0, 0
    for epoch in range(cfg.epochs):
        if cfg.mode == "async":
            orders = [p[sampling.permutation(p.size)] for p in pools]
        else:
            order = sampling.permutation(pool_size)
        sums = {r: 0.0 for r in active}
        n_batches = 0
        for bi, sl in enumerate(_batches(pool_size, cfg.batch_size)):
            batches = []
            for j, r in enumerate(active):
                if cfg.mode == "async":
                    t: SegmentTable = tables[j]
                    idx = orders[j][sl]
                    batches.append(ModalityBatch(r, t.features[idx], t.labels[idx], t.subjects[idx]))
                else:
                    idx = order[sl]
                    batches.append(ModalityBatch(r, aligned.features[r][idx], aligned.labels[idx], aligned.subjects[idx]))
            try:
                step = trip_step(params, batches, cfg, optimizers, stats, noise)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            params = step.params
            for r, v in step.losses.items():
                sums[r] += v
            n_batches += 1
        epoch_losses = {r: sums[r] / n_batches for r in active}
        for r in active:
            trace.append((epoch, dataset.modality_names[r], epoch_losses[r]))
        epochs_run = epoch + 1
        mean_loss = float(np.mean(list(epoch_losses.values())))
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
        if cfg.early_stop:
            if mean_loss < best - cfg.min_delta:
                best, stale = mean_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return TrainResult(params, trace, epochs_run, initial)


def epoch_mean_losses(trace: Sequence[tuple]) -> List[float]:
    """Mean loss across modalities per epoch."""
    by_epoch: Dict[int, List[float]] = {}
    for epoch, _, loss in trace:
        by_epoch.setdefault(epoch, []).append(loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
