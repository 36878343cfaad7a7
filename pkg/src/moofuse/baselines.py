"""Conventional fusion baselines trained with a single loss.

* ``early``: raw modality features are concatenated and go through one
  encoder, the backbone and a cosine head.
* ``late``: each modality has its own encoder and passes through the shared
  backbone; the resulting vectors are concatenated before the head.
* ``shared_latent``: each modality is linearly projected to the hidden width
  and the projections are summed before the backbone.

Masked modalities are fed as zero tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, Fold, aligned_table, oversample_modality_balanced, segment_table
from .errors import ConfigError, DataError, NumericError, UnsupportedModeError
from .model import ModelSpec, backbone_forward, read_checkpoint, save_checkpoint
from .numerics import Node, Rng, Tape, backward, xavier_uniform
from .rebalance import RebalanceConfig, balanced_stats, rebalanced_loss
from .train import TrainConfig, _batches, _stats_for, make_optimizer

KINDS = ("early", "late", "shared_latent")


@dataclass
class FusionSpec:
    kind: str
    modality_dims: List[int]
    num_classes: int
    hidden_width: int = 32
    backbone_depth: int = 2
    cosine_scale: float = 16.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"baseline kind must be one of {KINDS}, got {self.kind!r}")
        self.modality_dims = [int(d) for d in self.modality_dims]

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)

    @property
    def head_width(self) -> int:
        return self.hidden_width * (self.num_modalities if self.kind == "late" else 1)


def init_fusion(spec: FusionSpec, rng: Rng) -> Dict[str, np.ndarray]:
    h = spec.hidden_width
    params: Dict[str, np.ndarray] = {}
    if spec.kind == "early":
        d = sum(spec.modality_dims)
        params["enc.W"] = xavier_uniform(rng, d, h)
        params["enc.b"] = np.zeros(h)
    elif spec.kind == "late":
        for r, d in enumerate(spec.modality_dims):
            params[f"enc{r}.W"] = xavier_uniform(rng, d, h)
            params[f"enc{r}.b"] = np.zeros(h)
    else:
        for r, d in enumerate(spec.modality_dims):
            params[f"proj{r}.W"] = xavier_uniform(rng, d, h)
    for layer in range(spec.backbone_depth):
        params[f"backbone.W{layer}"] = xavier_uniform(rng, h, h)
        params[f"backbone.b{layer}"] = np.zeros(h)
    params["head.W"] = xavier_uniform(rng, spec.head_width, spec.num_classes, (spec.num_classes, spec.head_width))
    return params


def count_parameters(spec: FusionSpec) -> int:
    h, dims, K = spec.hidden_width, spec.modality_dims, spec.num_classes
    backbone = spec.backbone_depth * (h * h + h)
    if spec.kind == "early":
        enc = sum(dims) * h + h
    elif spec.kind == "late":
        enc = sum(d * h + h for d in dims)
    else:
        enc = sum(dims) * h
    return enc + backbone + K * spec.head_width


def trip_parameter_count(spec: ModelSpec) -> int:
    h = spec.hidden_width
    heads = 1 if spec.head_mode == "shared" else spec.num_modalities
    return (sum(d * h + h for d in spec.modality_dims) + spec.backbone_depth * (h * h + h)
            + heads * spec.num_classes * h)


def capacity_matched(kind: str, reference: ModelSpec) -> FusionSpec:
    """Fusion spec whose hidden width brings its size closest to ``reference``."""
    target = trip_parameter_count(reference)
    best = None
    for h in range(1, 4 * reference.hidden_width + 1):
        spec = FusionSpec(kind, reference.modality_dims, reference.num_classes, h,
                          reference.backbone_depth, reference.cosine_scale)
        gap = abs(count_parameters(spec) - target)
        if best is None or gap < best[0]:
            best = (gap, spec)
    return best[1]


def fusion_forward(params: Dict[str, np.ndarray], spec: FusionSpec, features: Sequence[np.ndarray],
                   mask: Optional[Sequence[bool]] = None, tape: Optional[Tape] = None) -> Node:
    """Logits node for aligned per-modality inputs; masked inputs become zeros."""
    tape = Tape() if tape is None else tape
    mask = [True] * spec.num_modalities if mask is None else list(mask)
    xs = []
    for r, f in enumerate(features):
        f = np.asarray(f, dtype=np.float64)
        xs.append(tape.constant(f if mask[r] else np.zeros_like(f)))
    p = lambda name: tape.param(name, params[name])
    if spec.kind == "early":
        x = tape.relu(tape.linear(tape.concat(xs), p("enc.W"), p("enc.b")))
        x = backbone_forward(tape, _backbone(params), spec.backbone_depth, x)
    elif spec.kind == "late":
        outs = []
        for r, x in enumerate(xs):
            u = tape.relu(tape.linear(x, p(f"enc{r}.W"), p(f"enc{r}.b")))
            outs.append(backbone_forward(tape, _backbone(params), spec.backbone_depth, u))
        x = tape.concat(outs)
    else:
        x = tape.add([tape.linear(x, p(f"proj{r}.W")) for r, x in enumerate(xs)])
        x = backbone_forward(tape, _backbone(params), spec.backbone_depth, x)
    return tape.cosine(x, p("head.W"), spec.cosine_scale)


def _backbone(params):
    return {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith("backbone.")}


def fusion_predict(params, spec: FusionSpec, features, mask=None) -> np.ndarray:
    return np.argmax(fusion_forward(params, spec, features, mask).value, axis=1)


@dataclass
class BaselineResult:
    params: Dict[str, np.ndarray]
    spec: FusionSpec
    trace: List[tuple]
    ill_posed: bool = False


def train_baseline(kind: str, dataset: Dataset, fold: Fold, cfg: TrainConfig,
                   spec: Optional[FusionSpec] = None, allow_ill_posed: bool = False) -> BaselineResult:
    """Train a fusion baseline on aligned multimodal batches.

    Asynchronous inputs mix subjects across modalities and are refused unless
    ``allow_ill_posed`` is set; such a run labels each fused row with the
    first modality's label.
    """
    if cfg.mode == "async" and not allow_ill_posed:
        raise UnsupportedModeError(f"{kind} fusion needs aligned inputs; asynchronous training is ill-posed")
    if spec is None:
        reference = ModelSpec(list(dataset.modality_dims), dataset.num_classes)
        spec = capacity_matched(kind, reference)
    params = init_fusion(spec, Rng.stream(cfg.seed, "init"))
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate)
    sampling = Rng.stream(cfg.seed, "sampling")
    noise = Rng.stream(cfg.seed, "noise")
    K = dataset.num_classes
    M = dataset.num_modalities

    if cfg.mode == "sync":
        aligned = aligned_table(dataset, fold.train_subjects)
        if len(aligned) == 0:
            raise DataError("no complete training subjects for synchronous training")
        label_source = aligned.labels
        size = len(aligned)
    else:
        tables = [segment_table(dataset, r, fold.train_subjects) for r in range(M)]
        pools = oversample_modality_balanced(tables, Rng.stream(cfg.seed, "oversample"))
        label_source = tables[0].labels[pools[0]]
        size = pools[0].size
    stats = _stats_for(label_source, K, cfg, f"{kind} fusion") if cfg.rebalance_enabled else balanced_stats(K)
    rcfg = cfg.rebalance if cfg.rebalance_enabled else RebalanceConfig(eta=0.0, margin_m=0.0)

    trace = []
    for epoch in range(cfg.epochs):
        if cfg.mode == "sync":
            order = sampling.permutation(size)
        else:
            orders = [p[sampling.permutation(p.size)] for p in pools]
        total, n = 0.0, 0
        for bi, sl in enumerate(_batches(size, cfg.batch_size)):
            if cfg.mode == "sync":
                idx = order[sl]
                feats = [aligned.features[r][idx] for r in range(M)]
                labels = aligned.labels[idx]
            else:
                feats = [tables[r].features[orders[r][sl]] for r in range(M)]
                labels = tables[0].labels[orders[0][sl]]
            tape = Tape()
            logits = fusion_forward(params, spec, feats, tape=tape)
            loss = rebalanced_loss(tape, logits, labels, stats, rcfg, noise)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch}, batch {bi}: non-finite {kind} fusion loss")
            grads = backward(tape, loss)
            params = {k: opt.step(k, v, grads[k]) for k, v in params.items()}
            total += value
            n += 1
        trace.append((epoch, "fused", total / n))
    return BaselineResult(params, spec, trace, ill_posed=cfg.mode == "async")


def save_baseline(path, result: BaselineResult, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, result.spec.kind, asdict(result.spec), iter(result.params.items()), extra)


def load_baseline(path):
    doc = read_checkpoint(path)
    if doc["kind"] not in KINDS:
        raise DataError(f"{path}: not a fusion baseline checkpoint")
    return FusionSpec(**doc["spec"]), doc["arrays"]
