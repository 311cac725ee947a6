"""Tabular dataset loading, one-hot encoding, splitting, and persistence.

Everything here is deterministic given its inputs: splits are a pure
function of (labels, seed), encoders are a pure function of the fitting
rows, and synthetic data is a pure function of its seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClassMissingInTrain, ParseError, SchemaMismatch

NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class Schema:
    """Column layout of a raw CSV: ordered (name, kind) pairs plus the target."""

    columns: tuple  # of (name, kind) pairs
    target: str
    positive_label: str | None = None

    def __post_init__(self):
        names = [name for name, _ in self.columns]
        if len(set(names)) != len(names):
            raise SchemaMismatch("duplicate column names in schema")
        if self.target not in names:
            raise SchemaMismatch(f"target column {self.target!r} not in schema")
        for name, kind in self.columns:
            if kind not in (NUMERIC, CATEGORICAL):
                raise SchemaMismatch(f"column {name!r} has unknown kind {kind!r}")

    @property
    def feature_columns(self):
        return [(n, k) for n, k in self.columns if n != self.target]

    def to_json(self):
        return {
            "columns": [[n, k] for n, k in self.columns],
            "target": self.target,
            "positive_label": self.positive_label,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            columns=tuple((n, k) for n, k in obj["columns"]),
            target=obj["target"],
            positive_label=obj.get("positive_label"),
        )


@dataclass
class RawDataset:
    """Parsed CSV prior to encoding: categorical cells are still tokens."""

    schema: Schema
    numeric: dict  # column name -> float ndarray
    categorical: dict  # column name -> list of str tokens
    labels: np.ndarray  # dense class indices
    class_names: list  # index -> original target token
    n_rows: int

    @property
    def n_classes(self):
        return len(self.class_names)


@dataclass
class Dataset:
    """Fully numeric feature matrix with dense integer class labels."""

    features: np.ndarray  # (n, F) float64
    labels: np.ndarray  # (n,) int64
    feature_names: list
    n_classes: int
    split_tags: list | None = None
    class_names: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("row count of features must equal length of labels")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature_names length must match feature columns")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN/Inf after encoding")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label indices must lie in [0, n_classes)")

    @property
    def n_rows(self):
        return self.features.shape[0]

    def subset(self, indices, tag=None):
        tags = [tag] * len(indices) if tag is not None else None
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            feature_names=list(self.feature_names),
            n_classes=self.n_classes,
            split_tags=tags,
            class_names=self.class_names,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    calib_frac: float
    test_frac: float
    seed: int

    def __post_init__(self):
        fracs = (self.train_frac, self.calib_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ValueError("each split fraction must exceed 0")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def load_csv(path, schema: Schema) -> RawDataset:
    """Parse a headered CSV against a schema.

    Numeric cells must parse as floats (empty cells are rejected);
    categorical cells are kept as raw tokens for the encoder.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, header row required") from None
        expected = [name for name, _ in schema.columns]
        if header != expected:
            raise SchemaMismatch(
                f"{path}: header {header!r} does not match schema columns {expected!r}"
            )
        kind_of = dict(schema.columns)
        numeric = {n: [] for n, k in schema.feature_columns if k == NUMERIC}
        categorical = {n: [] for n, k in schema.feature_columns if k == CATEGORICAL}
        target_tokens = []
        for row_idx, row in enumerate(reader):
            if len(row) != len(expected):
                raise ParseError(row_idx, "<row>", f"expected {len(expected)} cells, got {len(row)}")
            for col_name, cell in zip(expected, row):
                if col_name == schema.target:
                    target_tokens.append(cell)
                elif kind_of[col_name] == NUMERIC:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise ParseError(row_idx, col_name, f"not a number: {cell!r}") from None
                    if not math.isfinite(value):
                        raise ParseError(row_idx, col_name, f"non-finite value: {cell!r}")
                    numeric[col_name].append(value)
                else:
                    categorical[col_name].append(cell)

    labels, class_names = _encode_target(target_tokens, schema)
    return RawDataset(
        schema=schema,
        numeric={n: np.asarray(v, dtype=np.float64) for n, v in numeric.items()},
        categorical=categorical,
        labels=labels,
        class_names=class_names,
        n_rows=len(target_tokens),
    )


def _encode_target(tokens, schema: Schema):
    if schema.positive_label is not None:
        labels = np.asarray([1 if t == schema.positive_label else 0 for t in tokens], dtype=np.int64)
        negatives = sorted({t for t in tokens if t != schema.positive_label})
        if len(negatives) != 1:
            raise SchemaMismatch(
                f"positive_label given but target has {len(negatives)} non-positive categories"
            )
        return labels, [negatives[0], schema.positive_label]
    class_names = sorted(set(tokens))
    index = {c: i for i, c in enumerate(class_names)}
    return np.asarray([index[t] for t in tokens], dtype=np.int64), class_names


class OneHotEncoder:
    """One-hot expansion of categorical columns, vocabulary fixed at fit time.

    Categories unseen at fit time transform to an all-zero segment, so
    calibration and test rows always stay encodable without refitting.
    """

    def __init__(self):
        self.vocab = None  # column name -> sorted category list

    def fit(self, raw: RawDataset, rows) -> "OneHotEncoder":
        rows = np.asarray(rows)
        self.vocab = {
            name: sorted({raw.categorical[name][i] for i in rows})
            for name, kind in raw.schema.feature_columns
            if kind == CATEGORICAL
        }
        return self

    def transform(self, raw: RawDataset) -> Dataset:
        if self.vocab is None:
            raise RuntimeError("encoder not fitted")
        blocks = []
        names = []
        for col_name, kind in raw.schema.feature_columns:
            if kind == NUMERIC:
                blocks.append(raw.numeric[col_name][:, None])
                names.append(col_name)
            else:
                cats = self.vocab[col_name]
                pos = {c: j for j, c in enumerate(cats)}
                block = np.zeros((raw.n_rows, len(cats)))
                for i, token in enumerate(raw.categorical[col_name]):
                    j = pos.get(token)
                    if j is not None:
                        block[i, j] = 1.0
                blocks.append(block)
                names.extend(f"{col_name}={c}" for c in cats)
        features = np.hstack(blocks) if blocks else np.zeros((raw.n_rows, 0))
        return Dataset(
            features=features,
            labels=raw.labels,
            feature_names=names,
            n_classes=raw.n_classes,
            class_names=list(raw.class_names),
        )

    def to_json(self):
        return {"vocab": self.vocab}

    @classmethod
    def from_json(cls, obj):
        enc = cls()
        enc.vocab = {k: list(v) for k, v in obj["vocab"].items()}
        return enc

    def encode_rows(self, rows, schema: Schema):
        """Encode raw feature rows (list of dicts or lists, schema order) for serving."""
        numeric = {n: [] for n, k in schema.feature_columns if k == NUMERIC}
        categorical = {n: [] for n, k in schema.feature_columns if k == CATEGORICAL}
        feature_cols = schema.feature_columns
        for row in rows:
            if isinstance(row, dict):
                cells = [row[name] for name, _ in feature_cols]
            else:
                cells = list(row)
            if len(cells) != len(feature_cols):
                raise SchemaMismatch(
                    f"expected {len(feature_cols)} feature cells, got {len(cells)}"
                )
            for (name, kind), cell in zip(feature_cols, cells):
                if kind == NUMERIC:
                    numeric[name].append(float(cell))
                else:
                    categorical[name].append(str(cell))
        raw = RawDataset(
            schema=schema,
            numeric={n: np.asarray(v, dtype=np.float64) for n, v in numeric.items()},
            categorical=categorical,
            labels=np.zeros(len(rows), dtype=np.int64),
            class_names=["0"],
            n_rows=len(rows),
        )
        return self.transform(raw).features


def one_hot_encode(raw: RawDataset, fit_rows) -> Dataset:
    """Encode all rows of `raw` with a vocabulary built from `fit_rows` only."""
    return OneHotEncoder().fit(raw, fit_rows).transform(raw)


def _largest_remainder(total, fracs):
    """Integer apportionment of `total` by `fracs`, off by at most 1 per cell."""
    ideal = [total * f for f in fracs]
    counts = [int(math.floor(x)) for x in ideal]
    remainders = sorted(
        range(len(fracs)), key=lambda i: (-(ideal[i] - counts[i]), i)
    )
    for i in range(total - sum(counts)):
        counts[remainders[i]] += 1
    return counts


def split_indices(labels, spec: SplitSpec):
    """Stratified row assignment into (train, calib, test) index arrays.

    Deterministic per (labels, seed). Global split sizes follow the
    fractions by largest-remainder rounding; every class gets at least one
    training row or `ClassMissingInTrain` is raised.
    """
    labels = np.asarray(labels)
    n = len(labels)
    classes = np.unique(labels)
    targets = _largest_remainder(n, (spec.train_frac, spec.calib_frac, spec.test_frac))
    if targets[0] < len(classes):
        raise ClassMissingInTrain(
            f"train split of {targets[0]} rows cannot hold all {len(classes)} classes"
        )

    rng = np.random.default_rng(spec.seed)
    per_class_rows = {}
    alloc = {}
    for c in classes:
        rows = np.flatnonzero(labels == c)
        per_class_rows[c] = rows[rng.permutation(len(rows))]
        alloc[c] = _largest_remainder(
            len(rows), (spec.train_frac, spec.calib_frac, spec.test_frac)
        )
        if alloc[c][0] == 0:
            # steal one row for train from whichever split got more
            donor = 1 if alloc[c][1] >= alloc[c][2] else 2
            if alloc[c][donor] == 0:
                donor = 2 if donor == 1 else 1
            alloc[c][donor] -= 1
            alloc[c][0] += 1

    # Reconcile per-class allocations to the global targets, moving single
    # rows between splits (never emptying a class's train allocation).
    def column_sum(s):
        return sum(alloc[c][s] for c in classes)

    for s in (0, 1, 2):
        while column_sum(s) > targets[s]:
            over = [(d, c) for d in (0, 1, 2) if column_sum(d) < targets[d] for c in classes]
            moved = False
            for d, c in over:
                floor = 1 if s == 0 else 0
                if alloc[c][s] > floor:
                    alloc[c][s] -= 1
                    alloc[c][d] += 1
                    moved = True
                    break
            if not moved:
                raise ClassMissingInTrain("stratified allocation infeasible")

    train, calib, test = [], [], []
    for c in classes:
        rows = per_class_rows[c]
        a, b = alloc[c][0], alloc[c][0] + alloc[c][1]
        train.append(rows[:a])
        calib.append(rows[a:b])
        test.append(rows[b:])
    out = tuple(np.sort(np.concatenate(part)) for part in (train, calib, test))
    return out


def split(ds: Dataset, spec: SplitSpec):
    """Partition a Dataset into (train, calib, test) Datasets."""
    if ds.n_rows < 3 * ds.n_classes:
        raise ValueError("dataset needs at least 3 rows per class to split")
    idx_train, idx_calib, idx_test = split_indices(ds.labels, spec)
    return (
        ds.subset(idx_train, "train"),
        ds.subset(idx_calib, "calib"),
        ds.subset(idx_test, "test"),
    )


def make_synthetic(n, d, n_classes, seed) -> Dataset:
    """Gaussian class blobs with distinct random means, balanced within one row.

    Means are drawn per seed and rescaled so every pair of classes is at
    least 4.5 sigma apart: mostly separable, but with enough boundary
    overlap that a boosted model keeps learning local structure on every
    feature instead of saturating on one axis.
    """
    if n < 10 * n_classes:
        raise ValueError("need at least 10 rows per class")
    if d < 2:
        raise ValueError("need at least 2 features")
    rng = np.random.default_rng(seed)
    counts = _largest_remainder(n, [1.0 / n_classes] * n_classes)
    labels = np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)])
    means = rng.normal(0.0, 1.0, size=(n_classes, d))
    # every coordinate carries signal: floor the per-coordinate spread
    for j in range(d):
        col = means[:, j]
        spread = float(col.max() - col.min())
        center = float(col.mean())
        if spread < 1e-12:
            means[:, j] = center + 0.8 * (np.arange(n_classes) / max(n_classes - 1, 1) - 0.5)
        elif spread < 0.8:
            means[:, j] = center + (col - center) * (0.8 / spread)
    min_dist = min(
        float(np.linalg.norm(means[a] - means[b]))
        for a in range(n_classes)
        for b in range(a + 1, n_classes)
    )
    if min_dist < 4.5:
        means *= 4.5 / min_dist
    features = means[labels] + rng.standard_normal((n, d))
    order = rng.permutation(n)
    return Dataset(
        features=features[order],
        labels=labels[order],
        feature_names=[f"x{j}" for j in range(d)],
        n_classes=n_classes,
    )


def save_dataset(ds: Dataset, path):
    obj = {
        "feature_names": list(ds.feature_names),
        "rows": ds.features.tolist(),
        "labels": ds.labels.tolist(),
        "n_classes": ds.n_classes,
        "split_tags": ds.split_tags,
        "class_names": ds.class_names,
        "schema": None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, allow_nan=False)


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return Dataset(
        features=np.asarray(obj["rows"], dtype=np.float64).reshape(
            len(obj["labels"]), len(obj["feature_names"])
        ),
        labels=np.asarray(obj["labels"], dtype=np.int64),
        feature_names=obj["feature_names"],
        n_classes=obj["n_classes"],
        split_tags=obj.get("split_tags"),
        class_names=obj.get("class_names"),
    )
