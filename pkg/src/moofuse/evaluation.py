"""Accuracy, relative multimodal gain, cross-validation aggregation and masking."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import fusion_forward
from .data import AlignedTable, Dataset, Fold, aligned_table, oversample_aligned_eval, oversample_eval_balanced, segment_table
from .errors import DomainError
from .model import ModelParams, forward
from .numerics import Rng


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DomainError("predictions and labels differ in length")
    if labels.size == 0:
        raise DomainError("accuracy of an empty set")
    return 100.0 * float(np.sum(predictions == labels)) / labels.size


def delta_m(method, baseline, higher_is_better=None) -> float:
    """Mean signed relative change against reference models, in percent.

    Each term is ``(-1)^flag * (method - baseline) / baseline`` with
    ``flag = 1`` for higher-is-better metrics, so improvements come out
    negative.
    """
    pm = np.asarray(method, dtype=np.float64)
    pb = np.asarray(baseline, dtype=np.float64)
    flags = np.ones(pm.size, dtype=int) if higher_is_better is None else np.asarray(higher_is_better, dtype=int)
    if pm.shape != pb.shape or flags.shape != pm.shape or pm.size == 0:
        raise DomainError("method, baseline and flags must have equal nonzero length")
    if np.any(pb == 0):
        raise DomainError("baseline metric of zero")
    return float(100.0 * np.mean((-1.0) ** flags * (pm - pb) / pb))


def all_masks(m: int) -> List[Tuple[bool, ...]]:
    """Every nonempty modality subset, largest first."""
    masks = [tuple(bits) for bits in itertools.product([True, False], repeat=m) if any(bits)]
    return sorted(masks, key=lambda b: (-sum(b), [not x for x in b]))


def mask_key(mask: Sequence[bool], names: Sequence[str]) -> str:
    return "+".join(n for n, keep in zip(names, mask) if keep)


# ---------------------------------------------------------------------------
# evaluation pools


@dataclass
class EvalPool:
    """Class-balanced evaluation rows: per modality features plus labels.

    ``aligned`` pools share one index set across modalities (row i of every
    modality is the same segment), which fusion baselines require.
    """

    names: List[str]
    features: List[np.ndarray]
    labels: List[np.ndarray]
    aligned: bool


def eval_pool(dataset: Dataset, fold: Fold, seed: int = 0, aligned: bool = True) -> EvalPool:
    rng = Rng.stream(seed, "eval")
    K = dataset.num_classes
    if aligned:
        table: AlignedTable = aligned_table(dataset, fold.eval_subjects)
        idx = oversample_aligned_eval(table, K, rng)
        feats = [f[idx] for f in table.features]
        labels = [table.labels[idx]] * dataset.num_modalities
    else:
        tables = [segment_table(dataset, r, fold.eval_subjects) for r in range(dataset.num_modalities)]
        pools = oversample_eval_balanced(tables, K, rng)
        feats = [t.features[p] for t, p in zip(tables, pools)]
        labels = [t.labels[p] for t, p in zip(tables, pools)]
    return EvalPool(list(dataset.modality_names), feats, labels, aligned)


def masked_eval(model, pool: EvalPool, mask: Sequence[bool]) -> Dict[str, float]:
    """Accuracies with only the modalities in ``mask`` supplied.

    For the multi-stream model each unmasked stream predicts on its own and
    ``average`` is the mean over those streams. Fusion baselines, given as
    ``(params, FusionSpec)``, see zeros for masked streams and report one
    ``fused`` accuracy (repeated as ``average``).
    """
    mask = list(mask)
    if len(mask) != len(pool.names) or not any(mask):
        raise DomainError("mask must keep at least one modality")
    if isinstance(model, ModelParams):
        out = {}
        for r, keep in enumerate(mask):
            if keep:
                pred = np.argmax(forward(model, r, pool.features[r]).logits, axis=1)
                out[pool.names[r]] = accuracy(pred, pool.labels[r])
        out["average"] = float(np.mean([out[pool.names[r]] for r, keep in enumerate(mask) if keep]))
        return out
    params, spec = model
    if not pool.aligned:
        raise DomainError("fusion baselines need an aligned evaluation pool")
    logits = fusion_forward(params, spec, pool.features, mask).value
    acc = accuracy(np.argmax(logits, axis=1), pool.labels[0])
    return {"fused": acc, "average": acc}


def evaluate_fold(model, pool: EvalPool, masks: Optional[Iterable[Sequence[bool]]] = None) -> Dict[Tuple[str, str, str], float]:
    """Flat ``{(metric, modality, mask): value}`` for one fold."""
    masks = all_masks(len(pool.names)) if masks is None else masks
    out = {}
    for mask in masks:
        key = mask_key(mask, pool.names)
        for modality, value in masked_eval(model, pool, mask).items():
            out[("accuracy", modality, key)] = value
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsReport:
    """Mean and sample standard deviation across folds per metric key."""

    rows: Dict[Tuple[str, str, str], Tuple[float, float]] = field(default_factory=dict)
    folds: int = 0

    def mean(self, metric: str, modality: str, mask: str) -> float:
        return self.rows[(metric, modality, mask)][0]

    def std(self, metric: str, modality: str, mask: str) -> float:
        return self.rows[(metric, modality, mask)][1]

    def add_delta_m(self, modalities: Sequence[str], full_mask: str, references: Dict[str, float]) -> float:
        """Record the relative change of per-modality accuracies against reference accuracies."""
        pm = [self.mean("accuracy", name, full_mask) for name in modalities]
        pb = [references[name] for name in modalities]
        value = delta_m(pm, pb)
        self.rows[("delta_m", "all", full_mask)] = (value, 0.0)
        return value

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "modality", "mask", "mean", "std"])
        for (metric, modality, mask), (mean, std) in self.rows.items():
            w.writerow([metric, modality, mask, repr(mean), repr(std)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"folds": self.folds,
                "rows": [{"metric": k[0], "modality": k[1], "mask": k[2], "mean": v[0], "std": v[1]}
                         for k, v in self.rows.items()]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        rows = {(r["metric"], r["modality"], r["mask"]): (r["mean"], r["std"]) for r in doc["rows"]}
        return cls(rows, doc.get("folds", 0))


def aggregate_cv(per_fold: Sequence[Dict[Tuple[str, str, str], float]]) -> MetricsReport:
    """Unweighted mean and sample (n-1) standard deviation over folds.

    Keys keep first-seen order; values are reduced after sorting, so the
    result does not depend on fold order.
    """
    if len(per_fold) < 2:
        raise DomainError("aggregation needs at least two folds")
    keys: List[Tuple[str, str, str]] = []
    for report in per_fold:
        for key in report:
            if key not in keys:
                keys.append(key)
    keys.sort(key=lambda k: (k[0], k[2].count("+") * -1, k[2], k[1]))
    rows = {}
    for key in keys:
        values = np.sort([r[key] for r in per_fold if key in r])
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        rows[key] = (float(np.mean(values)), std)
    return MetricsReport(rows, len(per_fold))
