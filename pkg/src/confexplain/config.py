"""Experiment configuration: versioned JSON schema, strict validation
(unknown keys rejected), config hashing, and named seed substreams."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .boosting import GBTParams
from .conformal import ADDITIVE, ALL_KINDS, BETA_FLOOR, DEFAULT_K, EXPONENTIAL
from .data import Schema, SplitSpec
from .errors import ConfigError
from .surrogate_mlp import MLPConfig
from .surrogate_trees import LABEL, PROBABILITY

CONFIG_VERSION = 1


def _check_keys(obj, allowed, where):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _require(obj, key, where):
    if key not in obj:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return obj[key]


@dataclass
class DatasetSpec:
    name: str
    synthetic: dict = None  # {n, d, classes}
    csv: dict = None  # {path, schema: Schema}


@dataclass
class EstimatorSpec:
    kind: str
    k: int = DEFAULT_K
    gamma: float = 1.0
    rho: float = 1.0
    form: str = ADDITIVE
    beta: float = BETA_FLOOR

    @property
    def method_suffix(self):
        return self.kind


@dataclass
class ExperimentConfig:
    seed: int
    datasets: list
    split: dict  # {train, calib, test}
    grid: list  # GBTParams candidates for the black box
    surrogate_trees: GBTParams  # None disables the family
    surrogate_mlp: MLPConfig
    estimators: list
    epsilons: list
    output_dir: str
    augmentation: str = PROBABILITY
    timing_repeats: int = 3
    threads: int = 1
    raw: dict = field(default_factory=dict)

    def split_spec(self, seed):
        return SplitSpec(
            train_frac=self.split["train"],
            calib_frac=self.split["calib"],
            test_frac=self.split["test"],
            seed=seed,
        )


def substream_seed(root_seed, name) -> int:
    """Independent deterministic seed for a named pipeline component."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def config_hash(raw: dict) -> str:
    return hashlib.sha256(
        json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


_TOP_KEYS = {
    "version", "seed", "datasets", "split", "blackbox", "surrogates",
    "estimators", "epsilons", "output_dir", "augmentation",
    "timing_repeats", "threads",
}
_GBT_KEYS = {"learning_rate", "n_estimators", "max_depth", "l2_reg", "min_child_cover"}
_MLP_KEYS = {
    "hidden_sizes", "learning_rate", "momentum", "batch_size", "max_epochs",
    "patience", "val_fraction", "standardize", "seed",
}
_EST_KEYS = {"kind", "k", "gamma", "rho", "form", "beta"}


def _parse_gbt(obj, where) -> GBTParams:
    _check_keys(obj, _GBT_KEYS, where)
    try:
        return GBTParams(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid parameters in {where}: {exc}") from exc


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    version = _require(raw, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
    seed = _require(raw, "seed", "config")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    datasets = []
    raw_datasets = _require(raw, "datasets", "config")
    if not raw_datasets:
        raise ConfigError("at least one dataset is required")
    for i, d in enumerate(raw_datasets):
        where = f"datasets[{i}]"
        _check_keys(d, {"name", "synthetic", "csv"}, where)
        name = _require(d, "name", where)
        if ("synthetic" in d) == ("csv" in d):
            raise ConfigError(f"{where}: exactly one of 'synthetic' or 'csv' required")
        if "synthetic" in d:
            _check_keys(d["synthetic"], {"n", "d", "classes"}, f"{where}.synthetic")
            spec = DatasetSpec(name=name, synthetic={
                "n": _require(d["synthetic"], "n", where),
                "d": _require(d["synthetic"], "d", where),
                "classes": d["synthetic"].get("classes", 2),
            })
        else:
            c = d["csv"]
            _check_keys(c, {"path", "columns", "target", "positive_label"}, f"{where}.csv")
            path = _require(c, "path", where)
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            if not os.path.exists(path):
                raise ConfigError(f"{where}: csv file not found: {path}")
            schema = Schema(
                columns=tuple((n, k) for n, k in _require(c, "columns", where)),
                target=_require(c, "target", where),
                positive_label=c.get("positive_label"),
            )
            spec = DatasetSpec(name=name, csv={"path": path, "schema": schema})
        datasets.append(spec)
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError("dataset names must be unique")

    split_raw = _require(raw, "split", "config")
    _check_keys(split_raw, {"train", "calib", "test"}, "split")
    split = {k: float(_require(split_raw, k, "split")) for k in ("train", "calib", "test")}

    bb_raw = _require(raw, "blackbox", "config")
    _check_keys(bb_raw, {"grid"}, "blackbox")
    grid = [_parse_gbt(g, f"blackbox.grid[{i}]") for i, g in enumerate(_require(bb_raw, "grid", "blackbox"))]
    if not grid:
        raise ConfigError("blackbox.grid must be non-empty")

    sur_raw = _require(raw, "surrogates", "config")
    _check_keys(sur_raw, {"trees", "mlp"}, "surrogates")
    if not sur_raw:
        raise ConfigError("at least one surrogate family is required")
    trees = _parse_gbt(sur_raw["trees"], "surrogates.trees") if "trees" in sur_raw else None
    mlp = None
    if "mlp" in sur_raw:
        m = dict(sur_raw["mlp"])
        _check_keys(m, _MLP_KEYS, "surrogates.mlp")
        if "hidden_sizes" in m:
            m["hidden_sizes"] = tuple(m["hidden_sizes"])
        try:
            mlp = MLPConfig(**m)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid parameters in surrogates.mlp: {exc}") from exc

    estimators = []
    for i, e in enumerate(_require(raw, "estimators", "config")):
        where = f"estimators[{i}]"
        _check_keys(e, _EST_KEYS, where)
        kind = _require(e, "kind", where)
        if kind not in ALL_KINDS:
            raise ConfigError(f"{where}: unknown estimator kind {kind!r}")
        form = e.get("form", ADDITIVE)
        if form not in (ADDITIVE, EXPONENTIAL):
            raise ConfigError(f"{where}: unknown form {form!r}")
        estimators.append(
            EstimatorSpec(
                kind=kind,
                k=e.get("k", DEFAULT_K),
                gamma=e.get("gamma", 1.0),
                rho=e.get("rho", 1.0),
                form=form,
                beta=e.get("beta", BETA_FLOOR),
            )
        )
    if not estimators:
        raise ConfigError("at least one estimator is required")
    kinds = [f"{e.kind}:{e.form}" for e in estimators]
    if len(set(kinds)) != len(kinds):
        raise ConfigError("duplicate estimator kinds in config")

    epsilons = [float(e) for e in _require(raw, "epsilons", "config")]
    if not epsilons or any(not 0 < e < 1 for e in epsilons):
        raise ConfigError("epsilons must be a non-empty list of values in (0, 1)")

    augmentation = raw.get("augmentation", PROBABILITY)
    if augmentation not in (PROBABILITY, LABEL):
        raise ConfigError(f"unknown augmentation mode {augmentation!r}")

    out_dir = _require(raw, "output_dir", "config")
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    return ExperimentConfig(
        seed=seed,
        datasets=datasets,
        split=split,
        grid=grid,
        surrogate_trees=trees,
        surrogate_mlp=mlp,
        estimators=estimators,
        epsilons=epsilons,
        output_dir=out_dir,
        augmentation=augmentation,
        timing_repeats=int(raw.get("timing_repeats", 3)),
        threads=int(raw.get("threads", 1)),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def builtin_synthetic_config(output_dir, seed=0) -> dict:
    """Small self-contained experiment used by `run --builtin` and the docs."""
    return {
        "version": CONFIG_VERSION,
        "seed": seed,
        "datasets": [
            {"name": "blobs-a", "synthetic": {"n": 2000, "d": 6, "classes": 2}},
            {"name": "blobs-b", "synthetic": {"n": 2000, "d": 8, "classes": 2}},
        ],
        "split": {"train": 0.5, "calib": 0.25, "test": 0.25},
        "blackbox": {
            "grid": [
                {"learning_rate": 0.1, "n_estimators": 100, "max_depth": 3, "l2_reg": 0.01}
            ]
        },
        "surrogates": {
            "trees": {"learning_rate": 0.1, "n_estimators": 100, "max_depth": 3, "l2_reg": 0.01},
            "mlp": {"hidden_sizes": [128, 128], "max_epochs": 60, "seed": 0},
        },
        "estimators": [
            {"kind": "none"},
            {"kind": "knn-dist", "k": 25},
            {"kind": "knn-label-std", "k": 25},
            {"kind": "knn-combined", "k": 25},
            {"kind": "min-dist"},
            {"kind": "avg-dist"},
            {"kind": "pred-conf"},
        ],
        "epsilons": [0.05],
        "output_dir": output_dir,
    }
