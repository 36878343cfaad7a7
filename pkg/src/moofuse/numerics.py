"""Dense linear algebra helpers, seeded randomness and a small reverse-mode tape.

The tape only knows the handful of layers the models in this package are built
from (affine maps, ReLU, cosine-normalised heads, concatenation, addition and
the margin cross-entropy loss). Every op stores what its backward needs at
record time, so ``backward`` is a single reverse sweep over the node list.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

COSINE_FLOOR = 1e-12


def as_matrix(values) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim}-D")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matrix product overflowed")
    return out


# ---------------------------------------------------------------------------
# randomness


def stream_seed(root: int, name: str) -> np.random.SeedSequence:
    """Seed sequence for the named sub-stream of ``root``.

    Named streams (``init``, ``data``, ``noise``, ``sampling``...) are
    independent of each other and of the order in which they are requested.
    """
    return np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(name.encode()),))


class Rng:
    """Seeded PRNG. Same seed plus same call sequence gives the same draws."""

    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @classmethod
    def stream(cls, root: int, name: str) -> "Rng":
        return cls(stream_seed(root, name))

    def child(self, name: str) -> "Rng":
        key = tuple(self._seq.spawn_key) + (zlib.crc32(name.encode()),)
        return Rng(np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=key))

    def uniform(self, size=None):
        return self._gen.random(size)

    def standard_normal(self, size=None):
        """Box-Muller transform of two uniform draws per output value."""
        n = 1 if size is None else int(np.prod(size))
        u1 = 1.0 - self._gen.random(n)  # (0, 1], keeps the log finite
        u2 = self._gen.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)


def sample_clamped_normal(rng: Rng, sigma: float) -> float:
    """One draw of N(0, sigma^2) clipped to [-1, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return float(min(1.0, max(-1.0, sigma * rng.standard_normal())))


def clamped_normal(rng: Rng, sigma: float, shape) -> np.ndarray:
    """Array version of :func:`sample_clamped_normal`; same per-value mapping."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return np.clip(sigma * rng.standard_normal(shape), -1.0, 1.0)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return (2.0 * rng.uniform(shape) - 1.0) * limit


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    index: int
    value: np.ndarray
    name: Optional[str] = None  # set for parameter leaves

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Record:
    op: str
    parents: tuple
    backward: Optional[Callable[[np.ndarray], tuple]]


@dataclass
class Tape:
    nodes: List[Node] = field(default_factory=list)
    records: List[_Record] = field(default_factory=list)

    def _push(self, value, op, parents=(), backward=None, name=None) -> Node:
        node = Node(len(self.nodes), value, name)
        self.nodes.append(node)
        self.records.append(_Record(op, tuple(p.index for p in parents), backward))
        return node

    @property
    def ops(self) -> List[str]:
        return [r.op for r in self.records]

    # leaves

    def param(self, name: str, value: np.ndarray) -> Node:
        return self._push(value, "param", name=name)

    def constant(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64), "constant")

    # layers

    def linear(self, x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
        if x.value.shape[1] != weight.value.shape[0]:
            raise ShapeError(f"linear: input width {x.value.shape[1]} != weight rows {weight.value.shape[0]}")
        out = x.value @ weight.value
        xv, wv = x.value, weight.value
        if bias is None:
            return self._push(out, "linear", (x, weight), lambda g: (g @ wv.T, xv.T @ g))
        out = out + bias.value
        return self._push(out, "linear", (x, weight, bias), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))

    def bias_add(self, x: Node, bias: Node) -> Node:
        return self._push(x.value + bias.value, "bias", (x, bias), lambda g: (g, g.sum(axis=0)))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._push(np.where(mask, x.value, 0.0), "relu", (x,), lambda g: (g * mask,))

    def cosine(self, x: Node, weight: Node, scale: float) -> Node:
        """``scale * <x_i, w_j> / max(|x_i||w_j|, 1e-12)`` for weight rows ``w_j``."""
        xv, wv = x.value, weight.value
        if xv.shape[1] != wv.shape[1]:
            raise ShapeError(f"cosine: feature width {xv.shape[1]} != weight width {wv.shape[1]}")
        dots = xv @ wv.T
        xn = np.sqrt(np.sum(xv * xv, axis=1))
        wn = np.sqrt(np.sum(wv * wv, axis=1))
        prod = np.outer(xn, wn)
        active = prod > COSINE_FLOOR
        denom = np.where(active, prod, COSINE_FLOOR)
        out = scale * dots / denom

        def backward(g):
            a = scale * g / denom
            ca = np.where(active, a * dots, 0.0)
            inv_x2 = np.where(xn > 0, 1.0 / np.where(xn > 0, xn * xn, 1.0), 0.0)
            inv_w2 = np.where(wn > 0, 1.0 / np.where(wn > 0, wn * wn, 1.0), 0.0)
            dx = a @ wv - xv * (ca.sum(axis=1) * inv_x2)[:, None]
            dw = a.T @ xv - wv * (ca.sum(axis=0) * inv_w2)[:, None]
            return dx, dw

        return self._push(out, "cosine", (x, weight), backward)

    def concat(self, xs: Sequence[Node]) -> Node:
        widths = [x.value.shape[1] for x in xs]
        cuts = np.cumsum(widths)[:-1]
        out = np.concatenate([x.value for x in xs], axis=1)
        return self._push(out, "concat", tuple(xs), lambda g: tuple(np.split(g, cuts, axis=1)))

    def add(self, xs: Sequence[Node]) -> Node:
        out = xs[0].value.copy()
        for x in xs[1:]:
            out = out + x.value
        return self._push(out, "add", tuple(xs), lambda g: tuple(g for _ in xs))

    # scalar reductions

    def sum(self, x: Node) -> Node:
        shape = x.value.shape
        return self._push(np.array(x.value.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))

    def half_sq_norm(self, x: Node) -> Node:
        xv = x.value
        return self._push(np.array(0.5 * np.sum(xv * xv)), "half_sq_norm", (x,), lambda g: (float(g) * xv,))

    def margin_cross_entropy(self, logits: Node, labels, offsets=None, sample_weights=None) -> Node:
        """Mean over rows of ``weight_i * -log softmax(z_i + offset_i)[y_i]``.

        ``offsets`` (noise and target margin) and ``sample_weights`` are
        recorded as constants and receive no gradient.
        """
        z = logits.value
        n, k = z.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ShapeError("one label per logit row required")
        zbar = z if offsets is None else z + offsets
        sw = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
        shifted = zbar - zbar.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        rows = np.arange(n)
        loss = float(np.sum(sw * -logp[rows, labels]) / n)

        def backward(g):
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            return (float(g) * p * (sw / n)[:, None],)

        return self._push(np.array(loss), "loss", (logits,), backward)


def backward(tape: Tape, seed: Node) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar node.

    Returns one gradient per parameter name recorded on the tape (summed if a
    parameter was recorded more than once). Parameters never recorded are not
    in the result.
    """
    if seed.value.size != 1:
        raise ContractError(f"backward needs a scalar seed, got shape {seed.value.shape}")
    if tape.nodes[seed.index] is not seed:
        raise ContractError("seed node does not belong to this tape")
    adj: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adj[seed.index] = np.ones_like(seed.value)
    for i in range(seed.index, -1, -1):
        g = adj[i]
        rec = tape.records[i]
        if g is None or rec.backward is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            adj[parent] = pg if adj[parent] is None else adj[parent] + pg
    grads: Dict[str, np.ndarray] = {}
    for node, g in zip(tape.nodes, adj):
        if node.name is None:
            continue
        g = np.zeros_like(node.value) if g is None else g
        grads[node.name] = grads[node.name] + g if node.name in grads else g
    return grads
