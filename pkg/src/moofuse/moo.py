"""Conflict-averse combination of per-modality gradients on the shared backbone.

Given backbone gradients ``g_1..g_M`` and their mean ``g0``, the simplex point
``w`` minimising ``g_w . g0 + beta |g0| |g_w|`` (with ``g_w = sum_i w_i g_i``)
is found numerically, and the backbone moves along

    d = g0 + beta |g0| / |g_w| * g_w.

``d`` always stays within ``beta |g0|`` of the plain average, so the average
loss still descends, while the weight shifts toward whichever modality is
making the least progress.

Only M = 2 and M = 3 are supported. Everything is evaluated through the
M x M Gram matrix of the gradients, so the solver cost does not depend on the
number of backbone parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, NumericError

NORM_GUARD = 1e-12
SOLVERS = ("grid+refine", "projected-descent")


@dataclass(frozen=True)
class FlatGradient:
    """Gradient of one parameter group flattened in a fixed coordinate order."""

    coords: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64).ravel()
        if not np.all(np.isfinite(coords)):
            raise NumericError("gradient has non-finite coordinates")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "norm", float(np.linalg.norm(coords)))

    def __len__(self):
        return self.coords.size

    def scaled(self, c: float) -> "FlatGradient":
        return FlatGradient(self.coords * c)


@dataclass(frozen=True)
class SimplexWeights:
    weights: np.ndarray
    degenerate: bool = False  # set when every gradient was zero

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a simplex point: {w}")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size


@dataclass
class MooConfig:
    beta: float = 0.8
    solver: str = "grid+refine"
    grid_resolution: int = 200
    max_iters: int = 500
    tol: float = 1e-10

    def __post_init__(self):
        problems = []
        if not (0.0 <= self.beta < 1.0) or not math.isfinite(self.beta):
            problems.append(f"moo.beta must lie in [0, 1), got {self.beta}")
        if self.solver not in SOLVERS:
            problems.append(f"moo.solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.grid_resolution < 2:
            problems.append("moo.grid_resolution must be >= 2")
        if self.max_iters < 1:
            problems.append("moo.max_iters must be >= 1")
        if not self.tol > 0:
            problems.append("moo.tol must be > 0")
        if problems:
            raise ConfigError(problems)


def _stack(grads: Sequence[FlatGradient]) -> np.ndarray:
    if not grads:
        raise ShapeError("need at least one gradient")
    n = len(grads[0])
    for g in grads:
        if len(g) != n:
            raise ShapeError(f"gradient lengths differ: {n} vs {len(g)}")
    return np.stack([g.coords for g in grads])


def average_gradient(grads: Sequence[FlatGradient]) -> FlatGradient:
    return FlatGradient(_stack(grads).mean(axis=0))


def objective(w, grads: Sequence[FlatGradient], g0: FlatGradient, beta: float) -> float:
    """``g_w . g0 + beta |g0| |g_w|`` at simplex point ``w``."""
    w = w.weights if isinstance(w, SimplexWeights) else np.asarray(w, dtype=np.float64)
    gw = w @ _stack(grads)
    return float(gw @ g0.coords + beta * g0.norm * np.linalg.norm(gw))


class _Problem:
    """The objective restricted to the Gram matrix of the (rescaled) gradients."""

    def __init__(self, G: np.ndarray, beta: float):
        self.Q = G @ G.T
        g0 = G.mean(axis=0)
        self.b = G @ g0
        self.c = beta * float(np.linalg.norm(g0))

    def value(self, W: np.ndarray) -> np.ndarray:
        """Objective for each row of ``W`` (rows are simplex points)."""
        W = np.atleast_2d(W)
        quad = np.einsum("ij,jk,ik->i", W, self.Q, W)
        return W @ self.b + self.c * np.sqrt(np.maximum(quad, 0.0))

    def grad(self, w: np.ndarray) -> np.ndarray:
        qw = self.Q @ w
        nrm = math.sqrt(max(float(w @ qw), 0.0))
        if nrm <= NORM_GUARD:
            return self.b.copy()
        return self.b + self.c * qw / nrm


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def simplex_grid(m: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of 1/resolution."""
    if m == 1:
        return np.ones((1, 1))
    if m == 2:
        t = np.arange(resolution + 1) / resolution
        return np.column_stack([t, 1.0 - t])
    if m == 3:
        i, j = np.meshgrid(np.arange(resolution + 1), np.arange(resolution + 1), indexing="ij")
        keep = i + j <= resolution
        i, j = i[keep], j[keep]
        return np.column_stack([i, j, resolution - i - j]) / resolution
    raise ValueError("simplex grids are only built for M <= 3")


def _edge_minimiser(prob: _Problem, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact minimiser of the objective on the segment ``a + t (b - a)``.

    Along the segment the objective is ``p t + c sqrt(s + 2 r t + q t^2)`` plus a
    constant; setting the derivative to zero gives a quadratic in ``t`` whose
    admissible root is clipped to [0, 1]. Convexity makes the clipped root the
    minimiser.
    """
    v = b - a
    qv = prob.Q @ v
    q, r, s = float(v @ qv), float(a @ qv), float(a @ prob.Q @ a)
    p = float(prob.b @ v)
    if prob.c == 0.0 or q <= 0.0:
        t = 0.0 if p > 0 else (1.0 if p < 0 else 0.5)
        return a + t * v
    k = -p / prob.c
    if q <= k * k:
        t = 0.0 if p > 0 else 1.0
    else:
        t = (-r + k * math.sqrt(max(q * s - r * r, 0.0) / (q - k * k))) / q
        t = min(1.0, max(0.0, t))
    return a + t * v


def _newton_interior(prob: _Problem, w: np.ndarray, iters: int = 50) -> np.ndarray:
    """Polish an interior M=3 point with damped Newton steps on the reduced coordinates."""
    P = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    fw = float(prob.value(w)[0])
    for _ in range(iters):
        qw = prob.Q @ w
        nrm = math.sqrt(max(float(w @ qw), 0.0))
        if nrm <= NORM_GUARD or prob.c == 0.0:
            return w
        g = P.T @ (prob.b + prob.c * qw / nrm)
        H = P.T @ (prob.c * (prob.Q / nrm - np.outer(qw, qw) / nrm**3)) @ P
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return w
        if not np.all(np.isfinite(step)):
            return w
        t = 1.0
        while t > 1e-8:
            cand = w + t * (P @ step)
            if cand.min() >= 0.0:
                fc = float(prob.value(cand)[0])
                # near the optimum values are flat to rounding; let the step through
                if fc <= fw + 1e-13 * max(1.0, abs(fw)):
                    break
            t *= 0.5
        else:
            return w
        if float(np.abs(cand - w).max()) < 1e-16:
            return cand
        w, fw = cand, fc
    return w


def _projected_descent(prob: _Problem, w: np.ndarray, iters: int, tol: float) -> np.ndarray:
    fw = float(prob.value(w)[0])
    step = 1.0 / max(float(np.abs(prob.Q).max()) + prob.c, 1e-12)
    for _ in range(iters):
        g = prob.grad(w)
        while True:
            cand = project_simplex(w - step * g)
            fc = float(prob.value(cand)[0])
            if fc <= fw - 1e-4 * float(g @ (w - cand)) or step < 1e-16:
                break
            step *= 0.5
        moved = float(np.abs(cand - w).max())
        if fc < fw:
            w, fw = cand, fc
        if moved < tol:
            break
        step *= 2.0
    return w


def solve_simplex(grads: Sequence[FlatGradient], g0: FlatGradient, cfg: MooConfig) -> SimplexWeights:
    """Simplex weights minimising the conflict-averse objective.

    Flat objectives (for instance identical gradients) resolve to the uniform
    point. All-zero gradients return the uniform point flagged ``degenerate``.
    """
    G = _stack(grads)
    m = G.shape[0]
    if m > 3:
        raise ValueError(f"solver supports at most 3 modalities, got {m}")
    uniform = np.full(m, 1.0 / m)
    if m == 1:
        return SimplexWeights(np.ones(1))
    scale = float(np.abs(G).max())
    if scale == 0.0:
        return SimplexWeights(uniform, degenerate=True)
    # the argmin is scale invariant; rescaling keeps the tolerances meaningful
    prob = _Problem(G / scale, cfg.beta)

    grid = simplex_grid(m, cfg.grid_resolution)
    vals = prob.value(grid)
    best = grid[int(np.argmin(vals))]
    # exact candidates first: among values tied to rounding, the earliest wins
    candidates = []
    if cfg.solver == "grid+refine":
        eye = np.eye(m)
        for a, b in ((0, 1), (0, 2), (1, 2))[: 1 if m == 2 else 3]:
            candidates.append(_edge_minimiser(prob, eye[a], eye[b]))
    if m == 3 or cfg.solver == "projected-descent":
        interior = _projected_descent(prob, best.copy(), cfg.max_iters, cfg.tol)
        if m == 3 and interior.min() > 0.0:
            candidates.insert(0, _newton_interior(prob, interior))
        candidates.append(interior)
    candidates.append(best)
    cand = np.array(candidates)
    cvals = prob.value(cand)
    fbest = float(cvals.min())
    slack = 1e-13 * max(1.0, abs(fbest))
    w = cand[int(np.flatnonzero(cvals <= fbest + slack)[0])]
    funi = float(prob.value(uniform)[0])
    if funi <= fbest + 1e-12 * max(1.0, abs(fbest)):
        w = uniform
    w = np.maximum(w, 0.0)
    return SimplexWeights(w / w.sum())


def combine(grads: Sequence[FlatGradient], weights) -> FlatGradient:
    w = weights.weights if isinstance(weights, SimplexWeights) else np.asarray(weights)
    return FlatGradient(w @ _stack(grads))


@dataclass
class Direction:
    direction: FlatGradient
    weights: SimplexWeights
    g0: FlatGradient
    gw: FlatGradient


def conflict_averse_direction(grads: Sequence[FlatGradient], cfg: MooConfig) -> Direction:
    """Update direction plus the intermediate quantities behind it."""
    g0 = average_gradient(grads)
    w = solve_simplex(grads, g0, cfg)
    gw = combine(grads, w)
    if gw.norm < NORM_GUARD:
        d = g0
    else:
        d = FlatGradient(g0.coords + (cfg.beta * g0.norm / gw.norm) * gw.coords)
    return Direction(d, w, g0, gw)


def update_direction(grads: Sequence[FlatGradient], cfg: MooConfig) -> FlatGradient:
    """Backbone update direction; the caller applies ``phi <- phi - lr * d``."""
    return conflict_averse_direction(grads, cfg).direction


def cosine_similarity(a: FlatGradient, b: FlatGradient) -> float:
    if a.norm == 0 or b.norm == 0:
        return 0.0
    return float(a.coords @ b.coords / (a.norm * b.norm))


def pairwise_conflicts(grads: List[FlatGradient]) -> np.ndarray:
    m = len(grads)
    out = np.ones((m, m))
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i, j] = cosine_similarity(grads[i], grads[j])
    return out
