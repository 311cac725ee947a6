"""End-to-end experiment pipeline: prepare data, fit the black box, produce
ground-truth explanations, fit surrogates and difficulty estimators,
calibrate conformal explainers, benchmark, and persist every artifact under
the output directory.

All wall-clock numbers live in report["timing"]; everything else in the
report is a deterministic function of (config, seed, backend).
"""

from __future__ import annotations

import dataclasses
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__
from .boosting import (
    GBTParams,
    fit_gbt_classifier,
    grid_search,
    load_ensemble,
    save_ensemble,
)
from .config import ExperimentConfig, config_hash, substream_seed
from .conformal import (
    ConformalExplainer,
    calibrate_explainer,
    estimator_from_json,
    estimator_to_json,
    fit_difficulty_estimator,
    predict_intervals,
)
from .data import (
    Dataset,
    OneHotEncoder,
    load_csv,
    load_dataset,
    make_synthetic,
    save_dataset,
    split_indices,
)
from .evaluation import (
    benchmark_methods,
    empirical_coverage,
    mean_normalized_width,
    nemenyi_cd,
    normalized_widths,
    average_ranks,
    friedman_statistic,
    rank_rows,
    top_k_features,
)
from .errors import ConfexplainError, UnsupportedK
from .kernels import BACKEND
from .plots import write_cd_diagram, write_interval_bars
from .shapley import explain_batch, load_explanations, save_explanations
from .surrogate_mlp import fit_mlp, load_mlp, save_mlp, MlpSurrogate
from .surrogate_trees import (
    augment,
    fit_per_feature_surrogate,
    load_surrogate,
    save_surrogate,
)

REPORT_SCHEMA = "confexplain-report-v1"

DEVIATIONS = [
    "normalized interval widths exclude features with zero ground-truth range",
    "top-k features are selected by mean absolute importance",
    "importance scores explain the margin (log-odds), not the probability",
]


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _eps_key(eps):
    return repr(float(eps))


def method_id(family, est_spec):
    suffix = est_spec.kind if est_spec.form == "additive" else f"{est_spec.kind}-exp"
    return f"{family}+{suffix}"


def _dataset_dir(out_dir, name):
    return os.path.join(out_dir, "datasets", name)


def prepare_dataset(spec, cfg: ExperimentConfig):
    """Load or synthesize, split deterministically, and encode without leakage."""
    seed_split = substream_seed(cfg.seed, f"split:{spec.name}")
    split_spec = cfg.split_spec(seed_split)
    if spec.synthetic is not None:
        seed_synth = substream_seed(cfg.seed, f"synthetic:{spec.name}")
        full = make_synthetic(
            spec.synthetic["n"], spec.synthetic["d"], spec.synthetic["classes"], seed_synth
        )
        idx_train, idx_calib, idx_test = split_indices(full.labels, split_spec)
        encoder = None
        schema = None
    else:
        raw = load_csv(spec.csv["path"], spec.csv["schema"])
        idx_train, idx_calib, idx_test = split_indices(raw.labels, split_spec)
        encoder = OneHotEncoder().fit(raw, idx_train)
        full = encoder.transform(raw)
        schema = spec.csv["schema"]

    tags = np.empty(full.n_rows, dtype=object)
    tags[idx_train] = "train"
    tags[idx_calib] = "calib"
    tags[idx_test] = "test"
    full.split_tags = tags.tolist()
    return {
        "full": full,
        "train": full.subset(idx_train, "train"),
        "calib": full.subset(idx_calib, "calib"),
        "test": full.subset(idx_test, "test"),
        "encoder": encoder,
        "schema": schema,
    }


def _splits_from_tags(full: Dataset):
    tags = np.asarray(full.split_tags)
    out = {}
    for tag in ("train", "calib", "test"):
        out[tag] = full.subset(np.flatnonzero(tags == tag), tag)
    return out


def interval_metrics(ce: ConformalExplainer, test: Dataset, truth, epsilon):
    """Coverage and width sections for one calibrated method at one level."""
    _, lo, hi, _ = predict_intervals(ce, test.features, epsilon)
    per_feature, excluded = normalized_widths((lo, hi), truth)
    n_feat = truth.values.shape[1]
    top10 = top_k_features(truth, min(10, n_feat))
    top5 = top_k_features(truth, min(5, n_feat))
    return {
        "coverage": empirical_coverage((lo, hi), truth),
        "per_feature_widths": (hi - lo).mean(axis=0).tolist(),
        "width_all": mean_normalized_width(per_feature),
        "width_top10": mean_normalized_width(per_feature, top10),
        "width_top5": mean_normalized_width(per_feature, top5),
        "excluded_features": excluded,
    }


def run_dataset(spec, cfg: ExperimentConfig, out_dir):
    """Full per-dataset pipeline; returns (results dict, timing dict)."""
    name = spec.name
    ds_dir = _dataset_dir(out_dir, name)
    os.makedirs(os.path.join(ds_dir, "conformal"), exist_ok=True)

    _log(f"[data] {name}: preparing splits")
    parts = prepare_dataset(spec, cfg)
    train, calib, test = parts["train"], parts["calib"], parts["test"]
    save_dataset(parts["full"], os.path.join(ds_dir, "dataset.json"))
    if parts["encoder"] is not None:
        with open(os.path.join(ds_dir, "encoder.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {"schema": parts["schema"].to_json(), **parts["encoder"].to_json()},
                fh,
                sort_keys=True,
            )

    seed_bb = substream_seed(cfg.seed, f"bb:{name}")
    if len(cfg.grid) > 1:
        _log(f"[blackbox] {name}: grid search over {len(cfg.grid)} candidates")
        params = grid_search(train, calib, cfg.grid, seed_bb)
    else:
        params = cfg.grid[0]
    _log(f"[blackbox] {name}: fitting {params.n_estimators} trees, depth {params.max_depth}")
    bb = fit_gbt_classifier(train, params, seed_bb)
    save_ensemble(bb, os.path.join(ds_dir, "blackbox.json"))

    _log(f"[explain] {name}: ground-truth explanations for all splits")
    truths = {}
    for tag, part in (("train", train), ("calib", calib), ("test", test)):
        truths[tag], _ = explain_batch(bb, part.features, feature_names=part.feature_names)
        save_explanations(truths[tag], os.path.join(ds_dir, f"truth_{tag}.json"))

    surrogates = {}
    if cfg.surrogate_trees is not None:
        _log(f"[surrogate] {name}: per-feature boosted trees")
        surrogates["trees"] = fit_per_feature_surrogate(
            train.features,
            truths["train"],
            bb,
            cfg.surrogate_trees,
            seed=substream_seed(cfg.seed, f"surrogate:{name}"),
            mode=cfg.augmentation,
            threads=cfg.threads,
        )
        save_surrogate(surrogates["trees"], os.path.join(ds_dir, "surrogate_trees.json"))
    if cfg.surrogate_mlp is not None:
        _log(f"[surrogate] {name}: multi-target perceptron")
        mlp_cfg = dataclasses.replace(
            cfg.surrogate_mlp, seed=substream_seed(cfg.seed, f"mlp:{name}")
        )
        model = fit_mlp(
            augment(train.features, bb, cfg.augmentation), truths["train"], mlp_cfg
        )
        surrogates["mlp"] = MlpSurrogate(
            model=model, mode=cfg.augmentation, feature_names=list(train.feature_names)
        )
        save_mlp(surrogates["mlp"], os.path.join(ds_dir, "surrogate_mlp.json"))

    _log(f"[conformal] {name}: fitting estimators and calibrating")
    explainers = {}
    for est_spec in cfg.estimators:
        est = fit_difficulty_estimator(
            est_spec.kind,
            train,
            truths["train"],
            bb,
            k=est_spec.k,
            gamma=est_spec.gamma,
            rho=est_spec.rho,
            form=est_spec.form,
            beta=est_spec.beta,
        )
        est_json = estimator_to_json(
            est,
            knn_train_ref="dataset.json",
            knn_truth_ref="truth_train.json",
            blackbox_ref="blackbox.json",
        )
        for family, surrogate in surrogates.items():
            mid = method_id(family, est_spec)
            ce = calibrate_explainer(surrogate, est, calib, truths["calib"], bb, cfg.epsilons)
            explainers[mid] = ce
            payload = {
                "surrogate_family": family,
                "estimator": est_json,
                "thresholds": {_eps_key(e): t.tolist() for e, t in ce.thresholds.items()},
                "n_calib": ce.n_calib,
                "feature_names": ce.feature_names,
            }
            with open(os.path.join(ds_dir, "conformal", f"{mid}.json"), "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, allow_nan=False)

    primary_eps = cfg.epsilons[0]
    _log(f"[benchmark] {name}: timing {len(explainers)} methods plus the exact explainer")
    bench = benchmark_methods(
        bb, explainers, test, truths["test"], primary_eps, repeats=cfg.timing_repeats
    )

    methods = {}
    timing = {}
    for r in bench:
        timing[r.method] = r.elapsed_seconds
        if r.method == "exact":
            continue
        metrics = {_eps_key(primary_eps): r.to_json()}
        for eps in cfg.epsilons[1:]:
            extra = interval_metrics(explainers[r.method], test, truths["test"], eps)
            metrics[_eps_key(eps)] = {**extra, "epsilon": eps, "method": r.method}
        methods[r.method] = {"epsilon_metrics": metrics}

    results = {
        "blackbox_params": dataclasses.asdict(params),
        "n_rows": parts["full"].n_rows,
        "n_features": len(train.feature_names),
        "splits": {"train": train.n_rows, "calib": calib.n_rows, "test": test.n_rows},
        "methods": methods,
    }

    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    n_feat = truths["test"].values.shape[1]
    show = top_k_features(truths["test"], min(10, n_feat))
    for mid, ce in explainers.items():
        points, lo, hi, _ = predict_intervals(ce, test.features[:1], primary_eps)
        write_interval_bars(
            os.path.join(plots_dir, f"intervals_{name}_{mid}"),
            [test.feature_names[f] for f in show],
            truths["test"].values[0, show],
            points[0, show],
            lo[0, show],
            hi[0, show],
            title=f"{name}: {mid} (epsilon={primary_eps})",
        )
    return results, timing


def _build_rank_section(metric_rows, methods, dataset_names, lower_is_better=True):
    """Rank table + Friedman + Nemenyi for one metric across datasets."""
    table = np.asarray(metric_rows, dtype=np.float64)
    ranks = rank_rows(table, lower_is_better)
    avg = average_ranks(table, lower_is_better)
    section = {
        "methods": list(methods),
        "datasets": list(dataset_names),
        "values": table.tolist(),
        "ranks": ranks.tolist(),
        "avg_ranks": avg.tolist(),
    }
    if table.shape[0] >= 2:
        stat, df, reject = friedman_statistic(ranks)
        section["friedman"] = {"chi2": stat, "df": df, "reject_at_0.05": reject}
        try:
            section["nemenyi_cd"] = nemenyi_cd(table.shape[1], table.shape[0], 0.05)
        except UnsupportedK as exc:
            section["nemenyi_cd"] = None
            section["nemenyi_note"] = str(exc)
    else:
        section["friedman"] = None
        section["nemenyi_cd"] = None
    return section


def run_experiment(cfg: ExperimentConfig) -> dict:
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfexplainError(
            f"output directory is locked by another run: {lock_path}"
        ) from None
    try:
        os.write(lock_fd, str(os.getpid()).encode())
        os.close(lock_fd)
        return _run_experiment_locked(cfg)
    finally:
        os.unlink(lock_path)


def _run_experiment_locked(cfg: ExperimentConfig) -> dict:
    out_dir = cfg.output_dir
    chash = config_hash(cfg.raw)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.raw, fh, sort_keys=True, indent=2)

    all_results = {}
    all_timing = {}
    for spec in cfg.datasets:
        results, timing = run_dataset(spec, cfg, out_dir)
        all_results[spec.name] = results
        all_timing[spec.name] = timing

    primary_eps = cfg.epsilons[0]
    dataset_names = [d.name for d in cfg.datasets]
    method_ids = sorted(
        mid for mid in all_results[dataset_names[0]]["methods"]
    )

    rank_tables = {}
    if len(dataset_names) >= 2 and len(method_ids) >= 2:
        for metric in ("width_all", "width_top10", "width_top5"):
            rows = [
                [
                    all_results[ds]["methods"][mid]["epsilon_metrics"][_eps_key(primary_eps)][metric]
                    for mid in method_ids
                ]
                for ds in dataset_names
            ]
            rank_tables[metric] = _build_rank_section(rows, method_ids, dataset_names)
    else:
        rank_tables["skipped"] = "rank statistics need at least 2 datasets and 2 methods"

    timing_methods = method_ids + ["exact"]
    timing_section = {
        "repeats": cfg.timing_repeats,
        "datasets": all_timing,
    }
    if len(dataset_names) >= 2 and len(timing_methods) >= 2:
        rows = [
            [all_timing[ds][mid] for mid in timing_methods] for ds in dataset_names
        ]
        timing_section["rank_table"] = _build_rank_section(rows, timing_methods, dataset_names)

    report = {
        "schema": REPORT_SCHEMA,
        "config_hash": chash,
        "seed": cfg.seed,
        "backend": BACKEND,
        "attribution_space": "margin",
        "deviations": DEVIATIONS,
        "epsilons": cfg.epsilons,
        "primary_epsilon": primary_eps,
        "datasets": all_results,
        "rank_tables": rank_tables,
        "timing": timing_section,
    }
    _write_report(out_dir, report)
    _write_rank_plots(out_dir, report)

    manifest = {
        "package": "confexplain",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": BACKEND,
        "config_hash": chash,
        "seed": cfg.seed,
        "created_unix": time.time(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    return report


def _write_report(out_dir, report):
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, allow_nan=False, indent=1)


def _write_rank_plots(out_dir, report):
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    for metric, section in report["rank_tables"].items():
        if not isinstance(section, dict) or section.get("nemenyi_cd") is None:
            continue
        write_cd_diagram(
            os.path.join(plots_dir, f"cd_{metric}"),
            section["methods"],
            section["avg_ranks"],
            section["nemenyi_cd"],
            title=f"Average rank: {metric} (lower is better)",
        )
    timing_table = report["timing"].get("rank_table")
    if isinstance(timing_table, dict) and timing_table.get("nemenyi_cd") is not None:
        write_cd_diagram(
            os.path.join(plots_dir, "cd_time"),
            timing_table["methods"],
            timing_table["avg_ranks"],
            timing_table["nemenyi_cd"],
            title="Average rank: execution time (lower is better)",
        )


def load_dataset_artifacts(ds_dir):
    """Reload everything persisted by run_dataset for one dataset."""
    full = load_dataset(os.path.join(ds_dir, "dataset.json"))
    splits = _splits_from_tags(full)
    bb = load_ensemble(os.path.join(ds_dir, "blackbox.json"))
    truths = {
        tag: load_explanations(os.path.join(ds_dir, f"truth_{tag}.json"))
        for tag in ("train", "calib", "test")
    }
    surrogates = {}
    trees_path = os.path.join(ds_dir, "surrogate_trees.json")
    if os.path.exists(trees_path):
        surrogates["trees"] = load_surrogate(trees_path)
    mlp_path = os.path.join(ds_dir, "surrogate_mlp.json")
    if os.path.exists(mlp_path):
        surrogates["mlp"] = load_mlp(mlp_path)

    explainers = {}
    conf_dir = os.path.join(ds_dir, "conformal")
    for fname in sorted(os.listdir(conf_dir)):
        if not fname.endswith(".json"):
            continue
        mid = fname[: -len(".json")]
        with open(os.path.join(conf_dir, fname), encoding="utf-8") as fh:
            payload = json.load(fh)
        est = estimator_from_json(
            payload["estimator"],
            train_X=splits["train"].features,
            truth_values=truths["train"].values,
            blackbox=bb,
        )
        explainers[mid] = ConformalExplainer(
            surrogate=surrogates[payload["surrogate_family"]],
            blackbox=bb,
            estimator=est,
            thresholds={
                float(k): np.asarray(v, dtype=np.float64)
                for k, v in payload["thresholds"].items()
            },
            n_calib=payload["n_calib"],
            feature_names=payload["feature_names"],
        )
    return {
        "full": full,
        "splits": splits,
        "blackbox": bb,
        "truths": truths,
        "surrogates": surrogates,
        "explainers": explainers,
    }


def bench_experiment(cfg: ExperimentConfig) -> dict:
    """Timing-only rerun over persisted artifacts; rewrites report['timing']."""
    out_dir = cfg.output_dir
    report_path = os.path.join(out_dir, "report.json")
    if not os.path.exists(report_path):
        raise ConfexplainError(f"missing report (run first): {report_path}")
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)

    primary_eps = report["primary_epsilon"]
    all_timing = {}
    dataset_names = [d.name for d in cfg.datasets]
    for name in dataset_names:
        ds_dir = _dataset_dir(out_dir, name)
        if not os.path.isdir(ds_dir):
            raise ConfexplainError(f"missing artifacts for dataset {name!r}: {ds_dir}")
        _log(f"[bench] {name}: re-timing persisted methods")
        art = load_dataset_artifacts(ds_dir)
        bench = benchmark_methods(
            art["blackbox"],
            art["explainers"],
            art["splits"]["test"],
            art["truths"]["test"],
            primary_eps,
            repeats=cfg.timing_repeats,
        )
        all_timing[name] = {r.method: r.elapsed_seconds for r in bench}

    method_ids = sorted(m for m in next(iter(all_timing.values())) if m != "exact")
    timing_section = {"repeats": cfg.timing_repeats, "datasets": all_timing}
    timing_methods = method_ids + ["exact"]
    if len(dataset_names) >= 2 and len(timing_methods) >= 2:
        rows = [[all_timing[ds][mid] for mid in timing_methods] for ds in dataset_names]
        timing_section["rank_table"] = _build_rank_section(rows, timing_methods, dataset_names)
    report["timing"] = timing_section
    _write_report(out_dir, report)
    _write_rank_plots(out_dir, report)
    return report


def verify_report(out_dir) -> float:
    """Recompute coverage for every persisted method from disk.

    Returns the maximum absolute deviation from the report's coverage
    fields; artifacts round-trip bit-exactly, so this is ~0.
    """
    with open(os.path.join(out_dir, "report.json"), encoding="utf-8") as fh:
        report = json.load(fh)
    worst = 0.0
    for name, ds_report in report["datasets"].items():
        art = load_dataset_artifacts(_dataset_dir(out_dir, name))
        test = art["splits"]["test"]
        truth = art["truths"]["test"]
        for mid, entry in ds_report["methods"].items():
            for eps_key, metrics in entry["epsilon_metrics"].items():
                eps = float(eps_key)
                _, lo, hi, _ = predict_intervals(art["explainers"][mid], test.features, eps)
                cov = empirical_coverage((lo, hi), truth)
                worst = max(worst, abs(cov - metrics["coverage"]))
    return worst
