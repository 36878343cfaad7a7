"""End-to-end acceptance criteria, one test per criterion.

Each test prints an ``ACCEPTANCE n PASS/FAIL`` line; the lines are repeated in
the pytest terminal summary. Run with ``pytest tests/test_acceptance.py -s``.
"""

import json
import math
import time

import numpy as np
import pytest

from moofuse.baselines import capacity_matched, train_baseline
from moofuse.data import SyntheticSpec, generate, make_folds
from moofuse.evaluation import delta_m, eval_pool, masked_eval
from moofuse.experiment import cross_validate, write_run
from moofuse.model import ModelSpec, forward, init_params
from moofuse.moo import FlatGradient, MooConfig, average_gradient, conflict_averse_direction, objective
from moofuse.numerics import Rng, Tape, backward
from moofuse.rebalance import RebalanceConfig, compute_class_stats, logit_offsets, rebalanced_loss
from moofuse.train import ModalityBatch, TrainConfig, default_model_spec, train, trip_step

from .conftest import central_difference, rel_error
from .oracles import grid_minimum


def test_1_delta_m_exactness(report_criterion):
    start = time.perf_counter()
    cases = [((63.61, 49.76), (47.73, 33.47), -40.97),
             ((63.61, 49.76), (58.74, 50.50), -3.41),
             ((71.08, 63.03, 80.07), (66.22, 59.55, 77.56), -5.47)]
    got = [delta_m(pm, pb, [1] * len(pm)) for pm, pb, _ in cases]
    elapsed = time.perf_counter() - start
    ok = all(abs(g - c[2]) <= 0.01 for g, c in zip(got, cases)) and elapsed < 1
    report_criterion(1, ok, f"delta_m = {', '.join(f'{g:.4f}' for g in got)} (targets -40.97, -3.41, -5.47); {elapsed:.3f}s")
    assert ok


def test_2_moo_oracle_equivalence(report_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    betas = [round(0.1 * i, 1) for i in range(1, 10)]
    n, worst_gap, worst_ball, worst_descent = 1200, -math.inf, 0.0, math.inf
    for _ in range(n):
        m = int(rng.integers(2, 4))
        dim = int(rng.integers(1, 51))
        beta = float(rng.choice(betas))
        raw = rng.normal(size=(m, dim)) * 10.0 ** rng.uniform(-2, 2, size=(m, 1))
        if rng.uniform() < 0.3:  # force a conflicting pair
            raw[1] = -raw[0] * rng.uniform(0.2, 2.0) + 0.3 * rng.normal(size=dim) * np.abs(raw[0]).mean()
        grads = [FlatGradient(g) for g in raw]
        res = conflict_averse_direction(grads, MooConfig(beta=beta))
        g0 = average_gradient(grads)
        value = objective(res.weights, grads, g0, beta)
        _, v_ref = grid_minimum(raw, beta, 1e-4 if m == 2 else 1 / 300)
        worst_gap = max(worst_gap, value - v_ref)
        d, g0v = res.direction.coords, g0.coords
        n0 = np.linalg.norm(g0v)
        if res.gw.norm > 0:
            worst_ball = max(worst_ball, abs(np.linalg.norm(d - g0v) - beta * n0))
        # the bound is attained when g_w is antiparallel to g0, so allow rounding relative to |g0|^2
        worst_descent = min(worst_descent, (float(d @ g0v) - (1 - beta) * n0 ** 2) / max(n0 ** 2, 1e-300))
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 1e-6 and worst_ball <= 1e-9 and worst_descent >= -1e-12 and elapsed < 60
    report_criterion(2, ok, f"{n} instances: max(solver - grid) = {worst_gap:.2e}, max ball error = {worst_ball:.2e}, "
                            f"min relative descent slack = {worst_descent:.2e}; {elapsed:.1f}s")
    assert ok


def _pre_activations(params, modality, X):
    """Every ReLU input and the final hidden norms, computed with plain numpy."""
    enc = params.encoders[modality]
    z = X @ enc["W"] + enc["b"]
    pre = [z]
    h = np.maximum(z, 0)
    for layer in range(params.spec.backbone_depth):
        z = h @ params.backbone[f"W{layer}"] + params.backbone[f"b{layer}"]
        pre.append(z)
        h = np.maximum(z, 0)
    return np.concatenate([p.ravel() for p in pre]), np.linalg.norm(h, axis=1)


def _gradient_case(seed):
    """Random parameters and batches for both streams, away from ReLU kinks.

    Central differences are meaningless across a kink, so a point whose ReLU
    inputs come within 1e-3 of zero (or whose hidden rows are nearly all dead)
    is redrawn from the same seeded stream.
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec([4, 3], num_classes=3, hidden_width=6, backbone_depth=2)
    cfg = RebalanceConfig(eta=0.3, margin_m=0.4)
    stats = compute_class_stats([20, 7, 3], cfg)
    for _ in range(1000):
        params = init_params(spec, Rng(seed))
        for _, value in params.named():
            value[...] = rng.normal(size=value.shape) * 0.7
        batches = []
        for r, d in enumerate(spec.modality_dims):
            X, y = rng.normal(size=(5, d)), rng.integers(0, 3, size=5)
            batches.append((r, X, y, logit_offsets(y, stats, cfg, Rng.stream(seed, f"noise{r}"))))
        checks = [_pre_activations(params, r, X) for r, X, _, _ in batches]
        if all(np.abs(z).min() > 1e-3 and norms.min() > 1e-2 for z, norms in checks):
            return params, batches, stats, cfg
    raise RuntimeError("no kink-free point found")


def test_3_gradient_correctness(report_criterion):
    start = time.perf_counter()
    seeds, worst, worst_seed = 100, 0.0, None
    for seed in range(seeds):
        params, batches, stats, cfg = _gradient_case(seed)

        def total():
            tape = Tape()
            losses = []
            for r, X, y, offsets in batches:
                fr = forward(params, r, X, tape)
                losses.append(rebalanced_loss(tape, fr.node, y, stats, cfg, offsets=offsets))
            return tape, tape.add(losses)

        tape, loss = total()
        grads = backward(tape, loss)
        # float64 central differences carry ~eps*|f|/h of rounding noise; below
        # this floor a coordinate is compared in absolute terms
        floor = 1e-5 * max(1.0, abs(float(loss.value)))
        for name, value in params.named():
            numeric = central_difference(lambda: float(total()[1].value), value)
            err = float(rel_error(grads[name], numeric, floor).max())
            if err > worst:
                worst, worst_seed = err, (seed, name)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 120
    report_criterion(3, ok, f"{seeds} seeds, every coordinate of both streams' rebalanced losses: "
                            f"max relative error {worst:.2e} at {worst_seed}; {elapsed:.1f}s")
    assert ok


def test_4_reduction_identities(report_criterion):
    rng = np.random.default_rng(4)
    # beta = 0: backbone moves along the plain mean gradient
    spec = ModelSpec([5, 4], 3, hidden_width=6, backbone_depth=2)
    params = init_params(spec, Rng(4))
    batches = [ModalityBatch(r, rng.normal(size=(7, d)), rng.integers(0, 3, size=7)) for r, d in enumerate(spec.modality_dims)]
    cfg = TrainConfig(optimizer="sgd", backbone_optimizer="sgd", learning_rate=0.05, rebalance_enabled=False,
                      moo=MooConfig(beta=0.0))
    out = trip_step(params, batches, cfg)
    mean = (out.backbone_grads[0].coords + out.backbone_grads[1].coords) / 2
    keys = params.backbone_keys()
    before = np.concatenate([params.backbone[k].ravel() for k in keys])
    after = np.concatenate([out.params.backbone[k].ravel() for k in keys])
    step_err = float(np.abs(after - (before - 0.05 * mean)).max())

    # eta = 0, margin 0, balanced counts: plain cross-entropy
    ce_err = 0.0
    for _ in range(20):
        z, y = rng.normal(size=(9, 4)) * 4, rng.integers(0, 4, size=9)
        tape = Tape()
        value = float(rebalanced_loss(tape, tape.param("z", z), y, compute_class_stats([6] * 4),
                                      RebalanceConfig(eta=0.0, margin_m=0.0)).value)
        ref = float(np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(z.tolist(), y)]))
        ce_err = max(ce_err, abs(value - ref))

    # weights sum to the class count
    w_err = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 20))
        counts = rng.integers(1, 5000, size=k)
        rc = RebalanceConfig(epsilon=float(10 ** rng.uniform(-6, 1)), div=float(10 ** rng.uniform(-1, 1)))
        w_err = max(w_err, abs(compute_class_stats(counts, rc).weights.sum() - k))

    ok = step_err <= 1e-12 and ce_err <= 1e-12 and w_err <= 1e-9
    report_criterion(4, ok, f"beta=0 step error {step_err:.1e}, plain-CE error {ce_err:.1e}, weight-sum error {w_err:.1e}")
    assert ok


def _bootstrap_ci(values, rng, n=10_000):
    values = np.asarray(values)
    means = values[rng.integers(0, values.size, size=(n, values.size))].mean(axis=1)
    return np.percentile(means, [2.5, 97.5])


@pytest.mark.slow
def test_5_conflict_benchmark(report_criterion):
    start = time.perf_counter()
    diffs = []
    for seed in range(10):
        ds = generate(SyntheticSpec(num_classes=3, modality_dims=[16, 12], subjects_per_class=[10, 10, 10],
                                    segments_per_subject=[12, 12], conflict=1.0, dominance=[1.0, 0.5], noise=1.5,
                                    subject_scale=0.7, seed=seed))
        plan = make_folds(ds, 3, "async", seed=seed)
        acc = {}
        for beta in (0.8, 0.0):
            cfg = TrainConfig(mode="async", epochs=5, optimizer="sgd", learning_rate=0.005, rebalance_enabled=False,
                              moo=MooConfig(beta=beta), seed=seed)
            scores = []
            for fold in plan.folds:
                params = train(ds, fold, cfg).params
                scores.append(masked_eval(params, eval_pool(ds, fold, seed), (True, True))["average"])
            acc[beta] = float(np.mean(scores))
        diffs.append(acc[0.8] - acc[0.0])
    lo, hi = _bootstrap_ci(diffs, np.random.default_rng(0))
    elapsed = time.perf_counter() - start
    ok = lo > 0 and elapsed < 600
    report_criterion(5, ok, f"TRIP - averaging = {np.mean(diffs):+.2f} pp over 10 seeds, 95% bootstrap CI "
                            f"[{lo:.2f}, {hi:.2f}], {sum(d > 0 for d in diffs)}/10 seeds positive; {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_6_collapse_mitigation(report_criterion):
    start = time.perf_counter()
    trip_masked, early_masked, invariant = [], [], True
    for seed in range(5):
        ds = generate(SyntheticSpec(num_classes=3, modality_dims=[16, 12], subjects_per_class=[8, 8, 8],
                                    segments_per_subject=12, dominance=[8.0, 1.3], noise=1.0, seed=seed))
        cfg = TrainConfig(mode="sync", epochs=20, rebalance_enabled=False, seed=seed)
        fspec = capacity_matched("early", default_model_spec(ds, cfg))
        for fold in make_folds(ds, 3, "sync", seed=seed).folds:
            pool = eval_pool(ds, fold, seed)
            params = train(ds, fold, cfg).params
            full = masked_eval(params, pool, (True, True))
            weak = masked_eval(params, pool, (False, True))
            strong = masked_eval(params, pool, (True, False))
            invariant &= weak["mod1"] == full["mod1"] and strong["mod0"] == full["mod0"]
            alone = forward(params, 1, pool.features[1]).logits
            invariant &= bool(np.array_equal(alone, forward(params, 1, pool.features[1]).logits))
            trip_masked.append(weak["average"])
            early = train_baseline("early", ds, fold, cfg, fspec)
            early_masked.append(masked_eval((early.params, early.spec), pool, (False, True))["fused"])
    gap = float(np.mean(trip_masked) - np.mean(early_masked))
    elapsed = time.perf_counter() - start
    ok = gap >= 10 and invariant and elapsed < 600
    report_criterion(6, ok, f"dominant stream masked: TRIP {np.mean(trip_masked):.1f}% vs early fusion "
                            f"{np.mean(early_masked):.1f}% (gap {gap:.1f} pp over 15 folds); "
                            f"stream invariance {'exact' if invariant else 'VIOLATED'}; {elapsed:.1f}s")
    assert ok


def _run_files(doc, out):
    result = cross_validate(doc)
    written = write_run(result, doc, out, time.time())
    return {key: open(path, "rb").read() for key, path in written.items() if key != "manifest"}


def test_7_determinism_and_leakage(report_criterion, tmp_path):
    base = {"name": "det", "seed": 5, "folds": 2, "reference": True,
            "data": {"synthetic": {"num_classes": 3, "modality_dims": [6, 5], "subjects_per_class": [4, 4, 3],
                                   "segments_per_subject": [5, 3], "missing_rate": [0.0, 0.2], "seed": 5}},
            "model": {"hidden_width": 6, "backbone_depth": 1},
            "train": {"mode": "async", "epochs": 3, "batch_size": 8}}
    identical = True
    compared = 0
    for label, doc in (("trip", base),
                       ("early", {**base, "method": "early", "reference": False, "train": {**base["train"], "mode": "sync"}})):
        a = _run_files(doc, tmp_path / f"{label}_a")
        b = _run_files(doc, tmp_path / f"{label}_b")
        identical &= a.keys() == b.keys() and all(a[k] == b[k] for k in a)
        compared += len(a)
        ma = json.loads((tmp_path / f"{label}_a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / f"{label}_b" / "manifest.json").read_text())
        identical &= ma["config"] == mb["config"] and ma["seed"] == mb["seed"]

    leaks = checked = 0
    for data_seed in range(5):
        ds = generate(SyntheticSpec(num_classes=3, subjects_per_class=[6, 5, 4], missing_rate=[0.2, 0.3],
                                    segments_per_subject=3, seed=data_seed))
        eligible = min(sum(1 for s in ds.subjects if s.label == c and ds.is_complete(s)) for c in range(3))
        for seed in range(20):
            for mode in ("async", "sync"):
                for k in range(2, eligible + 1):
                    for fold in make_folds(ds, k, mode, seed=seed).folds:
                        checked += 1
                        leaks += bool(set(fold.eval_subjects) & set(fold.train_subjects))
    ok = identical and leaks == 0 and checked > 0
    report_criterion(7, ok, f"{compared} run files byte-identical across reruns: {identical}; "
                            f"{checked} folds checked, {leaks} with subject overlap")
    assert ok
