"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .data import SyntheticSpec, generate, write_csv
from .errors import ConfigError, DataError, NumericError
from .evaluation import MetricsReport, delta_m
from .experiment import ablation, cross_validate, evaluate_run, load_config, sweep, write_run

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("moofuse")


def _overrides(args) -> dict:
    return {"seed": getattr(args, "seed", None)}


def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen_data(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSpec(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, "data")
    try:
        paths = write_csv(generate(spec), out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    for path in paths.values():
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    doc = load_config(args.config, _overrides(args))
    if args.allow_ill_posed:
        doc["_allow_ill_posed"] = True
    result = cross_validate(doc)
    written = write_run(result, doc, _out_dir(args, f"runs/{doc.get('name', 'run')}"), started)
    sys.stdout.write(result.report.to_csv())
    log.info("wrote %d files", len(written))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_run(args.run)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_config(args.config, _overrides(args))
    text = ablation(doc)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _grid(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"grid must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    doc = load_config(args.config, _overrides(args))
    text = sweep(doc, args.param, _grid(args.grid))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    """Print a run's report; with --reference, add delta_m against another run."""
    run = Path(args.run)
    report = MetricsReport.from_dict(json.loads((run / "report.json").read_text(encoding="utf-8")))
    if args.reference:
        ref = MetricsReport.from_dict(json.loads((Path(args.reference) / "report.json").read_text(encoding="utf-8")))
        full = max((k[2] for k in report.rows), key=lambda m: m.count("+"))
        names = full.split("+")
        pm = [report.mean("accuracy", n, full) for n in names]
        pb = [ref.mean("accuracy", n, n) for n in names]
        report.rows[("delta_m", "all", full)] = (delta_m(pm, pb), 0.0)
    sys.stdout.write(report.to_json() if args.json else report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moofuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    p.add_argument("spec", help="JSON file with synthetic dataset settings")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="cross-validated training run")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-ill-posed", action="store_true",
                   help="let fusion baselines train on asynchronous (subject-mixed) inputs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a run's checkpoints under every modality mask")
    p.add_argument("run", help="run directory written by 'train'")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="MOO on/off x rebalancing on/off")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="vary beta or margin_m over a grid")
    p.add_argument("config")
    p.add_argument("--param", required=True, choices=["beta", "margin_m"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print a run report")
    p.add_argument("run")
    p.add_argument("--reference", help="run directory of single-modality references")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
