"""Run configuration, cross-validated runs and the files they emit.

A run config is one JSON document::

    {
      "name": "demo",
      "seed": 0,
      "folds": 3,
      "method": "trip",                 # trip | single | early | late | shared_latent
      "reference": true,                # also train single-modality models for delta_m
      "data": {"synthetic": {...}}      # or {"csv_dir": "path", "modalities": [...]}
      "model": {"hidden_width": 32, "backbone_depth": 2, "cosine_scale": 16.0},
      "train": {"mode": "async", "epochs": 30, ..., "moo": {...}, "rebalance": {...}}
    }

Every key is optional except ``data``. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional


from . import __version__
from .baselines import KINDS, capacity_matched, load_baseline, save_baseline, train_baseline
from .data import Dataset, FoldPlan, SyntheticSpec, generate, load_csv_dir, make_folds
from .errors import ConfigError, DataError, UnsupportedModeError
from .evaluation import MetricsReport, aggregate_cv, eval_pool, evaluate_fold, mask_key
from .model import ModelSpec, load_model, read_checkpoint, save_model
from .moo import MooConfig
from .rebalance import RebalanceConfig
from .train import TrainConfig, default_model_spec, train

METHODS = ("trip", "single") + KINDS
TOP_KEYS = {"name", "seed", "folds", "method", "reference", "data", "model", "train"}
MODEL_KEYS = {"hidden_width", "backbone_depth", "cosine_scale", "head_mode"}
WORKERS_ENV = "MOOFUSE_WORKERS"


def _unknown(section: str, given: dict, allowed) -> List[str]:
    return [f"{section}: unknown key {k!r}" for k in given if k not in allowed]


def _field_names(cls):
    return {f.name for f in fields(cls)}


def validate_config(doc: dict) -> List[str]:
    """Every schema problem in ``doc``; empty when the config is usable."""
    problems: List[str] = []
    if not isinstance(doc, dict):
        return ["config must be a JSON object"]
    problems += _unknown("config", {k: v for k, v in doc.items() if not k.startswith("_")}, TOP_KEYS)
    if "data" not in doc:
        problems.append("config: missing required key 'data'")
    else:
        data = doc["data"]
        if not isinstance(data, dict) or ("synthetic" in data) == ("csv_dir" in data):
            problems.append("data: give exactly one of 'synthetic' or 'csv_dir'")
        else:
            problems += _unknown("data", data, {"synthetic", "csv_dir", "modalities", "num_classes"})
            if "synthetic" in data:
                syn = data["synthetic"]
                problems += _unknown("data.synthetic", syn, _field_names(SyntheticSpec))
                try:
                    SyntheticSpec(**{k: v for k, v in syn.items() if k in _field_names(SyntheticSpec)})
                except ConfigError as exc:
                    problems += [f"data.synthetic: {p}" for p in exc.problems]
                except TypeError as exc:
                    problems.append(f"data.synthetic: {exc}")
    if doc.get("method", "trip") not in METHODS:
        problems.append(f"method must be one of {METHODS}, got {doc.get('method')!r}")
    folds = doc.get("folds", 3)
    if not isinstance(folds, int) or folds < 2:
        problems.append("folds must be an integer >= 2")
    if not isinstance(doc.get("seed", 0), int):
        problems.append("seed must be an integer")
    model = doc.get("model", {})
    problems += _unknown("model", model, MODEL_KEYS)
    tr = dict(doc.get("train", {}))
    problems += _unknown("train", tr, _field_names(TrainConfig))
    for section, cls in (("moo", MooConfig), ("rebalance", RebalanceConfig)):
        sub = tr.pop(section, {})
        problems += _unknown(f"train.{section}", sub, _field_names(cls))
        try:
            cls(**{k: v for k, v in sub.items() if k in _field_names(cls)})
        except ConfigError as exc:
            problems += exc.problems
    try:
        TrainConfig(**{k: v for k, v in tr.items() if k in _field_names(TrainConfig) and k != "seed"})
    except ConfigError as exc:
        problems += exc.problems
    return problems


def load_config(path, overrides: Optional[dict] = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return apply_overrides(doc, overrides or {})


def apply_overrides(doc: dict, overrides: dict) -> dict:
    doc = copy.deepcopy(doc)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    problems = validate_config(doc)
    if problems:
        raise ConfigError(problems)
    return doc


def build_dataset(doc: dict) -> Dataset:
    data = doc["data"]
    if "synthetic" in data:
        return generate(SyntheticSpec(**data["synthetic"]))
    return load_csv_dir(data["csv_dir"], data.get("modalities"), data.get("num_classes"))


def train_config(doc: dict) -> TrainConfig:
    tr = copy.deepcopy(doc.get("train", {}))
    tr.setdefault("seed", doc.get("seed", 0))
    return TrainConfig(**tr)


def model_spec(doc: dict, dataset: Dataset, cfg: TrainConfig) -> ModelSpec:
    return default_model_spec(dataset, cfg, **doc.get("model", {}))


# ---------------------------------------------------------------------------
# fold jobs


@dataclass
class FoldOutcome:
    index: int
    metrics: Dict[tuple, float]
    trace: List[tuple]
    checkpoint: Optional[dict] = None  # kind + arrays, written by the parent


def _run_fold(doc: dict, plan: FoldPlan, index: int, method: str) -> FoldOutcome:
    dataset = build_dataset(doc)
    cfg = train_config(doc)
    fold = plan.folds[index]
    pool = eval_pool(dataset, fold, seed=cfg.seed)
    if method == "trip":
        spec = model_spec(doc, dataset, cfg)
        res = train(dataset, fold, cfg, spec)
        return FoldOutcome(index, evaluate_fold(res.params, pool), res.trace, {"trip": res.params})
    if method == "single":
        metrics, trace = {}, []
        for r in range(dataset.num_modalities):
            spec = model_spec(doc, dataset, cfg)
            res = train(dataset, fold, cfg, spec, modalities=[r])
            mask = [q == r for q in range(dataset.num_modalities)]
            metrics.update(evaluate_fold(res.params, pool, [mask]))
            trace += res.trace
        return FoldOutcome(index, metrics, trace)
    fspec = capacity_matched(method, model_spec(doc, dataset, cfg))
    res = train_baseline(method, dataset, fold, cfg, fspec, allow_ill_posed=doc.get("_allow_ill_posed", False))
    return FoldOutcome(index, evaluate_fold((res.params, res.spec), pool), res.trace, {"baseline": res})


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from None


def run_folds(doc: dict, plan: FoldPlan, method: str) -> List[FoldOutcome]:
    n = workers()
    jobs = range(plan.k)
    if n == 1:
        return [_run_fold(doc, plan, i, method) for i in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(_run_fold, doc, plan, i, method) for i in jobs]
        return [f.result() for f in futures]


@dataclass
class RunResult:
    report: MetricsReport
    plan: FoldPlan
    outcomes: List[FoldOutcome]
    dataset: Dataset


def cross_validate(doc: dict, method: Optional[str] = None) -> RunResult:
    """Train and evaluate ``method`` on every fold; optionally add delta_m."""
    method = method or doc.get("method", "trip")
    dataset = build_dataset(doc)
    cfg = train_config(doc)
    if method in KINDS and cfg.mode == "async" and not doc.get("_allow_ill_posed", False):
        raise UnsupportedModeError(
            f"{method} fusion with asynchronous inputs is ill-posed; pass --allow-ill-posed to run it anyway")
    plan = make_folds(dataset, doc.get("folds", 3), cfg.mode, seed=cfg.seed)
    outcomes = run_folds(doc, plan, method)
    report = aggregate_cv([o.metrics for o in outcomes])
    if method == "trip" and doc.get("reference", False):
        refs = aggregate_cv([o.metrics for o in run_folds(doc, plan, "single")])
        full = mask_key([True] * dataset.num_modalities, dataset.modality_names)
        references = {name: refs.mean("accuracy", name, name) for name in dataset.modality_names}
        for name, value in references.items():
            report.rows[("reference_accuracy", name, name)] = refs.rows[("accuracy", name, name)]
        report.add_delta_m(dataset.modality_names, full, references)
    return RunResult(report, plan, outcomes, dataset)


# ---------------------------------------------------------------------------
# files


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "modality", "loss"])
    for epoch, modality, loss in trace:
        w.writerow([epoch, modality, repr(float(loss))])
    return buf.getvalue()


def write_run(result: RunResult, doc: dict, out_dir, started: float) -> Dict[str, str]:
    """Write checkpoints, traces, fold plan, report and manifest; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}

    def put(key, name, text):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written[key] = str(path)

    put("folds", "folds.json", json.dumps(result.plan.to_dict(), indent=1) + "\n")
    for o in result.outcomes:
        put(f"trace{o.index}", f"loss_trace_fold{o.index}.csv", trace_csv(o.trace))
        if o.checkpoint:
            path = out / f"fold{o.index}.ckpt.json"
            extra = {"fold": o.index, "modality_names": result.dataset.modality_names}
            if "trip" in o.checkpoint:
                save_model(path, o.checkpoint["trip"], extra)
            else:
                save_baseline(path, o.checkpoint["baseline"], extra)
            written[f"checkpoint{o.index}"] = str(path)
    put("report_json", "report.json", result.report.to_json())
    put("report_csv", "report.csv", result.report.to_csv())
    manifest = {
        "artifact_version": __version__,
        "seed": doc.get("seed", 0),
        "config": {k: v for k, v in doc.items() if not k.startswith("_")},
        "outputs": dict(sorted(written.items())),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    written["manifest"] = str(out / "manifest.json")
    return written


# ---------------------------------------------------------------------------
# ablation and sweeps


def _summary(report: MetricsReport, names: List[str]) -> List[float]:
    full = "+".join(names)
    values = []
    for name in names + ["average"]:
        key = ("accuracy", name, full)
        values += list(report.rows[key]) if key in report.rows else [float("nan")] * 2
    return values


def _table(header: List[str], rows: List[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _metric_header(names: List[str]) -> List[str]:
    cols = []
    for name in names + ["average"]:
        cols += [f"{name}_mean", f"{name}_std"]
    return cols


def ablation(doc: dict) -> str:
    """Four runs, {MOO on, off} x {rebalance on, off}, sharing every seed."""
    rows = []
    dataset_name = doc.get("name", "dataset")
    names = None
    for moo_on in (False, True):
        for reb_on in (False, True):
            variant = apply_overrides(doc, {"train.moo_enabled": moo_on, "train.rebalance_enabled": reb_on,
                                            "method": "trip", "reference": False})
            res = cross_validate(variant)
            names = res.dataset.modality_names
            rows.append([dataset_name, "on" if moo_on else "off", "on" if reb_on else "off"] + _summary(res.report, names))
    return _table(["dataset", "moo", "rebalance"] + _metric_header(names), rows)


SWEEP_PARAMS = {"beta": "train.moo.beta", "margin_m": "train.rebalance.margin_m"}


def sweep(doc: dict, param: str, grid: List[float]) -> str:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    bad = [v for v in grid if (param == "beta" and not 0 <= v < 1) or (param == "margin_m" and v < 0)]
    if bad:
        raise ConfigError(f"grid values outside the domain of {param}: {bad}")
    rows, names = [], None
    for value in grid:
        variant = apply_overrides(doc, {SWEEP_PARAMS[param]: float(value), "method": "trip", "reference": False})
        res = cross_validate(variant)
        names = res.dataset.modality_names
        rows.append([param, float(value)] + _summary(res.report, names))
    return _table(["param", "value"] + _metric_header(names), rows)


def evaluate_run(run_dir) -> MetricsReport:
    """Re-evaluate the checkpoints of a finished run under every modality mask."""
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    doc = manifest["config"]
    dataset = build_dataset(doc)
    cfg = train_config(doc)
    plan = FoldPlan.from_dict(json.loads((run / "folds.json").read_text(encoding="utf-8")))
    per_fold = []
    for i, fold in enumerate(plan.folds):
        path = run / f"fold{i}.ckpt.json"
        if not path.exists():
            raise DataError(f"{path}: checkpoint missing")
        kind = read_checkpoint(path)["kind"]
        if kind == "trip":
            model = load_model(path)
        else:
            spec, arrays = load_baseline(path)
            model = (arrays, spec)
        per_fold.append(evaluate_fold(model, eval_pool(dataset, fold, seed=cfg.seed)))
    return aggregate_cv(per_fold)
