"""Encoders, shared backbone and cosine heads with an explicit parameter partition.

Modality ``r`` flows through ``enc{r}`` (private), the backbone (shared by all
modalities) and a cosine head: ``head{r}`` per modality, or a single ``head``
referenced by every stream when ``head_mode == "shared"``.

Parameter names double as the partition key::

    enc{r}.W, enc{r}.b            encoder of modality r
    backbone.W{l}, backbone.b{l}  shared backbone layer l
    head{r}.W  or  head.W         cosine head (per modality or shared)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, PartitionError, RoutingError, ShapeError
from .moo import FlatGradient
from .numerics import Node, Rng, Tape, xavier_uniform

HEAD_MODES = ("per-modality", "shared")
CHECKPOINT_FORMAT = "moofuse-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    modality_dims: List[int]
    num_classes: int
    hidden_width: int = 32
    backbone_depth: int = 2
    head_mode: str = "per-modality"
    cosine_scale: float = 16.0

    def __post_init__(self):
        self.modality_dims = [int(d) for d in self.modality_dims]
        problems = []
        if not self.modality_dims or any(d < 1 for d in self.modality_dims):
            problems.append("model.modality_dims must be a nonempty list of positive widths")
        if self.num_classes < 2:
            problems.append("model.num_classes must be >= 2")
        if self.hidden_width < 1:
            problems.append("model.hidden_width must be >= 1")
        if self.backbone_depth < 1:
            problems.append("model.backbone_depth must be >= 1")
        if self.head_mode not in HEAD_MODES:
            problems.append(f"model.head_mode must be one of {HEAD_MODES}")
        if not self.cosine_scale > 0:
            problems.append("model.cosine_scale must be > 0")
        if problems:
            raise ConfigError(problems)

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class ModelParams:
    spec: ModelSpec
    encoders: List[Dict[str, np.ndarray]]
    backbone: Dict[str, np.ndarray]
    heads: List[Dict[str, np.ndarray]]

    def head_index(self, modality: int) -> int:
        return 0 if self.spec.head_mode == "shared" else modality

    def head_prefix(self, modality: int) -> str:
        return "head" if self.spec.head_mode == "shared" else f"head{modality}"

    def named(self) -> Iterator[Tuple[str, np.ndarray]]:
        for r, enc in enumerate(self.encoders):
            for k, v in enc.items():
                yield f"enc{r}.{k}", v
        for k, v in self.backbone.items():
            yield f"backbone.{k}", v
        for r, head in enumerate(self.heads):
            prefix = "head" if self.spec.head_mode == "shared" else f"head{r}"
            for k, v in head.items():
                yield f"{prefix}.{k}", v

    def get(self, name: str) -> np.ndarray:
        group, key = name.split(".", 1)
        return self._group(group)[key]

    def _group(self, group: str) -> Dict[str, np.ndarray]:
        if group == "backbone":
            return self.backbone
        if group == "head":
            return self.heads[0]
        if group.startswith("enc"):
            return self.encoders[int(group[3:])]
        if group.startswith("head"):
            return self.heads[int(group[4:])]
        raise KeyError(group)

    def set(self, name: str, value: np.ndarray) -> None:
        group, key = name.split(".", 1)
        self._group(group)[key] = value

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            [{k: v.copy() for k, v in e.items()} for e in self.encoders],
            {k: v.copy() for k, v in self.backbone.items()},
            [{k: v.copy() for k, v in h.items()} for h in self.heads],
        )

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named())

    def backbone_keys(self) -> List[str]:
        return backbone_keys(self.spec.backbone_depth)


def backbone_keys(depth: int) -> List[str]:
    keys = []
    for layer in range(depth):
        keys += [f"W{layer}", f"b{layer}"]
    return keys


def init_params(spec: ModelSpec, rng: Rng) -> ModelParams:
    """Xavier-uniform weights, zero biases; draws in a fixed order."""
    h = spec.hidden_width
    encoders = [{"W": xavier_uniform(rng, d, h), "b": np.zeros(h)} for d in spec.modality_dims]
    backbone = {}
    for layer in range(spec.backbone_depth):
        backbone[f"W{layer}"] = xavier_uniform(rng, h, h)
        backbone[f"b{layer}"] = np.zeros(h)
    n_heads = 1 if spec.head_mode == "shared" else spec.num_modalities
    heads = [{"W": xavier_uniform(rng, h, spec.num_classes, (spec.num_classes, h))} for _ in range(n_heads)]
    return ModelParams(spec, encoders, backbone, heads)


@dataclass
class ForwardResult:
    logits: np.ndarray
    tape: Tape
    node: Node
    modality: int


def backbone_forward(tape: Tape, backbone: Dict[str, np.ndarray], depth: int, x: Node, prefix="backbone") -> Node:
    for layer in range(depth):
        w = tape.param(f"{prefix}.W{layer}", backbone[f"W{layer}"])
        b = tape.param(f"{prefix}.b{layer}", backbone[f"b{layer}"])
        x = tape.relu(tape.linear(x, w, b))
    return x


def forward(params: ModelParams, modality: int, batch_features, tape: Optional[Tape] = None) -> ForwardResult:
    spec = params.spec
    if not (0 <= modality < spec.num_modalities):
        raise RoutingError(f"unknown modality index {modality}; model has {spec.num_modalities}")
    x = np.asarray(batch_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.modality_dims[modality]:
        raise ShapeError(f"modality {modality} expects width {spec.modality_dims[modality]}, got shape {x.shape}")
    tape = Tape() if tape is None else tape
    enc = params.encoders[modality]
    node = tape.constant(x)
    node = tape.relu(tape.linear(node, tape.param(f"enc{modality}.W", enc["W"]), tape.param(f"enc{modality}.b", enc["b"])))
    node = backbone_forward(tape, params.backbone, spec.backbone_depth, node)
    head = params.heads[params.head_index(modality)]
    node = tape.cosine(node, tape.param(f"{params.head_prefix(modality)}.W", head["W"]), spec.cosine_scale)
    return ForwardResult(node.value, tape, node, modality)


def predict(params: ModelParams, modality: int, batch_features) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest class index."""
    return np.argmax(forward(params, modality, batch_features).logits, axis=1)


# ---------------------------------------------------------------------------
# gradient partition


def flatten_backbone(grads: Dict[str, np.ndarray], keys: Sequence[str]) -> FlatGradient:
    return FlatGradient(np.concatenate([grads[k].ravel() for k in keys]))


def unflatten_backbone(flat: FlatGradient, like: Dict[str, np.ndarray], keys: Sequence[str]) -> Dict[str, np.ndarray]:
    out, start = {}, 0
    for k in keys:
        n = like[k].size
        out[k] = flat.coords[start:start + n].reshape(like[k].shape)
        start += n
    if start != len(flat):
        raise ShapeError(f"flat gradient has {len(flat)} coordinates, backbone has {start}")
    return out


@dataclass
class PartitionedGradients:
    encoder: Dict[str, np.ndarray]
    backbone: FlatGradient
    head: Dict[str, np.ndarray]
    modality: int


def partition_gradients(grad_map: Dict[str, np.ndarray], params: ModelParams, modality: int) -> PartitionedGradients:
    """Split a single-modality gradient map into encoder / backbone / head parts."""
    own_enc = f"enc{modality}"
    own_head = params.head_prefix(modality)
    encoder, head, backbone = {}, {}, {}
    for name, g in grad_map.items():
        group, key = name.split(".", 1)
        if group == "backbone":
            backbone[key] = g
        elif group == own_enc:
            encoder[key] = g
        elif group == own_head:
            head[key] = g
        else:
            raise PartitionError(f"gradient for {name} reached from modality {modality}")
    keys = params.backbone_keys()
    missing = [k for k in keys if k not in backbone]
    if missing:
        raise PartitionError(f"backbone gradient missing {missing}")
    return PartitionedGradients(encoder, flatten_backbone(backbone, keys), head, modality)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, kind: str, spec: dict, named: Iterator[Tuple[str, np.ndarray]], extra: Optional[dict] = None) -> None:
    """Write a structured-text checkpoint.

    Layout (JSON, keys in this order)::

        {"format": "moofuse-checkpoint", "version": 1, "kind": <model kind>,
         "spec": {...}, "extra": {...},
         "params": {<name>: {"shape": [...], "data": [floats, row-major]}}}

    Floats are written with ``repr`` precision, so loading is exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "spec": spec,
        "extra": extra or {},
        "params": {name: {"shape": list(v.shape), "data": v.ravel().tolist()} for name, v in named},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    doc["arrays"] = {
        name: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for name, p in doc["params"].items()
    }
    return doc


def save_model(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, "trip", asdict(params.spec), params.named(), extra)


def params_from_arrays(spec: ModelSpec, arrays: Dict[str, np.ndarray]) -> ModelParams:
    params = init_params(spec, Rng(0))
    expected = {name for name, _ in params.named()}
    if set(arrays) != expected:
        raise DataError(f"checkpoint parameters do not match spec: {sorted(set(arrays) ^ expected)}")
    for name, value in arrays.items():
        if value.shape != params.get(name).shape:
            raise DataError(f"checkpoint shape mismatch for {name}")
        params.set(name, value)
    return params


def load_model(path) -> ModelParams:
    doc = read_checkpoint(path)
    if doc["kind"] != "trip":
        raise DataError(f"{path}: expected a trip checkpoint, found {doc['kind']}")
    return params_from_arrays(ModelSpec(**doc["spec"]), doc["arrays"])
