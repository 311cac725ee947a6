"""Command-line interface.

Subcommands: run, explain, bench, validate-config. Progress goes to
stderr; stdout carries only machine-readable JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .config import load_config
from .data import OneHotEncoder, Schema
from .errors import ConfexplainError, ConfigError, NotCalibrated
from .pipeline import bench_experiment, load_dataset_artifacts, run_experiment
from .conformal import predict_interval, ConformalExplainer


def _resolve_threads(args):
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("CONFEXPLAIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CONFEXPLAIN_THREADS is not an integer: {env!r}") from None
    return None


def _load_config_with_overrides(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        raw = dict(cfg.raw)
        raw["seed"] = args.seed
        from .config import parse_config

        cfg = parse_config(raw, base_dir=os.path.dirname(os.path.abspath(args.config)))
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    threads = _resolve_threads(args)
    if threads is not None:
        cfg.threads = threads
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load_config_with_overrides(args)
    except ConfigError as exc:
        print(f"stage config: {exc}", file=sys.stderr)
        return 1
    try:
        report = run_experiment(cfg)
    except ConfexplainError as exc:
        print(f"stage run: {exc}", file=sys.stderr)
        return 1
    print(
        json.dumps(
            {
                "status": "ok",
                "output_dir": cfg.output_dir,
                "report": os.path.join(cfg.output_dir, "report.json"),
                "config_hash": report["config_hash"],
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_validate_config(args) -> int:
    try:
        load_config(args.config)
    except ConfigError as exc:
        print(f"stage config: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"valid": True, "config": args.config}))
    return 0


def cmd_bench(args) -> int:
    try:
        cfg = _load_config_with_overrides(args)
        bench_experiment(cfg)
    except (ConfigError, ConfexplainError, FileNotFoundError) as exc:
        print(f"stage bench: {exc}", file=sys.stderr)
        return 1
    print(
        json.dumps(
            {"status": "ok", "report": os.path.join(cfg.output_dir, "report.json")},
            sort_keys=True,
        )
    )
    return 0


def _read_instances(model_dir, path):
    """Instance rows for serving: raw schema columns when an encoder was
    fitted, encoded feature columns otherwise."""
    encoder_path = os.path.join(model_dir, "encoder.json")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfexplainError(f"no rows in instance file {path}")
    header, data = rows[0], rows[1:]
    if os.path.exists(encoder_path):
        with open(encoder_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        schema = Schema.from_json(payload["schema"])
        encoder = OneHotEncoder.from_json(payload)
        expected = [n for n, _ in schema.feature_columns]
        if header != expected:
            raise ConfexplainError(
                f"instance header {header!r} does not match schema features {expected!r}"
            )
        return encoder.encode_rows(data, schema)
    matrix = np.asarray([[float(c) for c in row] for row in data], dtype=np.float64)
    return matrix


def cmd_explain(args) -> int:
    try:
        art = load_dataset_artifacts(args.model_dir)
        if args.method not in art["explainers"]:
            raise ConfexplainError(
                f"method {args.method!r} not found; have {sorted(art['explainers'])}"
            )
        ce: ConformalExplainer = art["explainers"][args.method]
        X = _read_instances(args.model_dir, args.instances)
        for i in range(X.shape[0]):
            interval = predict_interval(ce, X[i], args.epsilon)
            print(json.dumps(interval.to_json(), sort_keys=True))
    except NotCalibrated as exc:
        print(f"stage explain: {exc}", file=sys.stderr)
        return 1
    except (ConfexplainError, FileNotFoundError) as exc:
        print(f"stage explain: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confexplain",
        description="Conformal intervals around surrogate explanations of boosted-tree models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline for a config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", help="override the config's output directory")
    p_run.add_argument("--seed", type=int, help="override the config's seed")
    p_run.add_argument("--threads", type=int)
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate-config", help="validate a config file")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(fn=cmd_validate_config)

    p_bench = sub.add_parser("bench", help="timing-only rerun over persisted artifacts")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--out", help="override the config's output directory")
    p_bench.add_argument("--threads", type=int)
    p_bench.set_defaults(fn=cmd_bench)

    p_exp = sub.add_parser("explain", help="interval explanations for instances (JSON lines)")
    p_exp.add_argument("model_dir", help="a persisted dataset directory (out/datasets/<name>)")
    p_exp.add_argument("instances", help="CSV of instances to explain")
    p_exp.add_argument("--epsilon", type=float, required=True)
    p_exp.add_argument("--method", default="trees+none")
    p_exp.set_defaults(fn=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
