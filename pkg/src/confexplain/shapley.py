"""Exact tree-path-dependent Shapley attributions and a subset-enumeration
oracle for verifying them.

Attributions explain the raw margin (log-odds), not the probability; a
tree's conditional expectation under a feature subset S follows the
instance's branch on features in S and cover-weights both branches
otherwise. The fast path (`tree_shap`) and the oracle
(`brute_force_shapley`) compute Shapley values of the same game and must
agree to float precision.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .boosting import Tree, TreeEnsemble, predict_margin
from .errors import TooManyFeatures

_BRUTE_FORCE_LIMIT = 20


@dataclass
class ImportanceVector:
    phi: np.ndarray  # one score per encoded feature
    base_value: float


@dataclass
class ExplanationMatrix:
    values: np.ndarray  # (n_instances, n_features)
    feature_names: list
    base_values: np.ndarray = None  # (n_instances,); zeros for surrogate output

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.base_values is None:
            self.base_values = np.zeros(self.values.shape[0])
        self.base_values = np.asarray(self.base_values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D")
        if len(self.base_values) != self.values.shape[0]:
            raise ValueError("one base value per instance required")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.base_values))):
            raise ValueError("explanations must be finite")

    @property
    def n_rows(self):
        return self.values.shape[0]

    def row(self, i) -> ImportanceVector:
        return ImportanceVector(phi=self.values[i].copy(), base_value=float(self.base_values[i]))


def tree_expectation(tree: Tree) -> float:
    """Cover-weighted mean leaf value (the tree's output over the training mix)."""
    leaves = tree.feature < 0
    return float(np.dot(tree.value[leaves], tree.cover[leaves]) / tree.cover[0])


def expected_value(ens: TreeEnsemble):
    """Expected margin over the training distribution, from cover counts.

    Scalar for single-margin objectives, one value per class for softmax.
    """
    out = np.zeros(ens.n_groups)
    for tree, cls in zip(ens.trees, ens.tree_class):
        out[cls] += tree_expectation(tree)
    out = ens.base_score + ens.learning_rate * out
    return float(out[0]) if ens.n_groups == 1 else out


def conditional_expectation(tree: Tree, x, subset) -> float:
    """Tree output conditioned on the features in `subset` taking x's values."""
    x = np.asarray(x, dtype=np.float64)
    subset = set(int(f) for f in subset)

    def rec(node):
        f = tree.feature[node]
        if f < 0:
            return float(tree.value[node])
        lo, hi = tree.left[node], tree.right[node]
        if int(f) in subset:
            child = lo if x[f] <= tree.threshold[node] else hi
            return rec(child)
        wl = tree.cover[lo] / tree.cover[node]
        wr = tree.cover[hi] / tree.cover[node]
        return wl * rec(lo) + wr * rec(hi)

    return rec(0)


def _tree_features(tree: Tree):
    return sorted(set(int(f) for f in tree.feature if f >= 0))


def _subset_values(tree: Tree, x, feats):
    """Conditional expectations for all 2^m subsets of `feats`, vectorized.

    Bit i of the subset mask corresponds to feats[i].
    """
    m = len(feats)
    bit_of = {f: i for i, f in enumerate(feats)}
    masks = np.arange(1 << m, dtype=np.int64)

    def rec(node):
        f = tree.feature[node]
        if f < 0:
            return np.full(len(masks), float(tree.value[node]))
        lo, hi = tree.left[node], tree.right[node]
        vl = rec(lo)
        vr = rec(hi)
        wl = tree.cover[lo] / tree.cover[node]
        wr = tree.cover[hi] / tree.cover[node]
        averaged = wl * vl + wr * vr
        followed = vl if x[f] <= tree.threshold[node] else vr
        in_subset = (masks >> bit_of[int(f)]) & 1
        return np.where(in_subset == 1, followed, averaged)

    return masks, rec(0)


def _popcount(masks, m):
    counts = np.zeros(len(masks), dtype=np.int64)
    for b in range(m):
        counts += (masks >> b) & 1
    return counts


def brute_force_shapley(ens: TreeEnsemble, x):
    """Shapley attribution by explicit subset enumeration per tree.

    Each tree is enumerated over its own distinct split features (features
    absent from a tree contribute nothing through it); per-tree values are
    scaled by the learning rate and summed.
    """
    x = np.asarray(x, dtype=np.float64)
    phi = np.zeros((ens.n_groups, ens.n_features))
    for tree, cls in zip(ens.trees, ens.tree_class):
        feats = _tree_features(tree)
        m = len(feats)
        if m > _BRUTE_FORCE_LIMIT:
            raise TooManyFeatures(
                f"tree splits on {m} features, enumeration bound is {_BRUTE_FORCE_LIMIT}"
            )
        if m == 0:
            continue
        masks, values = _subset_values(tree, x, feats)
        sizes = _popcount(masks, m)
        fact = [math.factorial(i) for i in range(m + 1)]
        weight_by_size = np.array(
            [fact[s] * fact[m - s - 1] / fact[m] for s in range(m)]
        )
        for i, f in enumerate(feats):
            without = masks[(masks >> i) & 1 == 0]
            with_f = without | (1 << i)
            w = weight_by_size[sizes[without]]
            phi[cls, f] += float(np.dot(w, values[with_f] - values[without]))
    phi *= ens.learning_rate
    base = expected_value(ens)
    if ens.n_groups == 1:
        return ImportanceVector(phi=phi[0], base_value=float(base))
    return [ImportanceVector(phi=phi[c], base_value=float(base[c])) for c in range(ens.n_groups)]


def shap_values(ens: TreeEnsemble, X) -> np.ndarray:
    """Path-dependent Shapley values for a batch; shape (n, n_groups, n_features)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    p = ens.packed()
    return kernels.tree_shap_groups(
        p["feature"], p["threshold"], p["left"], p["right"], p["value"],
        p["cover"], p["starts"], p["class_of"], ens.n_groups, X,
        ens.learning_rate,
    )


def tree_shap(ens: TreeEnsemble, x):
    """Exact path-dependent Shapley attribution for one instance.

    Returns an ImportanceVector, or one per class under softmax.
    """
    phi = shap_values(ens, x)[0]
    base = expected_value(ens)
    if ens.n_groups == 1:
        return ImportanceVector(phi=phi[0], base_value=float(base))
    return [ImportanceVector(phi=phi[c], base_value=float(base[c])) for c in range(ens.n_groups)]


def explain_batch(ens: TreeEnsemble, X, timer=True, feature_names=None):
    """Ground-truth explanations for a batch; wall clock covers attribution only.

    Under softmax the predicted class's attribution row is returned for
    every instance, so downstream regression stays single-target per feature.
    """
    X = np.asarray(X, dtype=np.float64)
    start = time.perf_counter() if timer else 0.0
    if X.shape[0] == 0:
        values = np.zeros((0, ens.n_features))
        bases = np.zeros(0)
    else:
        phi = shap_values(ens, X)
        base = expected_value(ens)
        if ens.n_groups == 1:
            values = phi[:, 0, :]
            bases = np.full(X.shape[0], float(base))
        else:
            margins = predict_margin(ens, X)
            picked = np.argmax(margins, axis=1)
            values = phi[np.arange(X.shape[0]), picked, :]
            bases = np.asarray(base)[picked]
    elapsed = (time.perf_counter() - start) if timer else 0.0
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(ens.n_features)]
    matrix = ExplanationMatrix(values=values, base_values=bases, feature_names=feature_names)
    return matrix, elapsed


def explanation_to_json(em: ExplanationMatrix) -> dict:
    return {
        "base_values": em.base_values.tolist(),
        "feature_names": list(em.feature_names),
        "rows": em.values.tolist(),
    }


def explanation_from_json(obj: dict) -> ExplanationMatrix:
    rows = np.asarray(obj["rows"], dtype=np.float64)
    if rows.size == 0:
        rows = rows.reshape(len(obj["base_values"]), len(obj["feature_names"]))
    return ExplanationMatrix(
        values=rows,
        base_values=np.asarray(obj["base_values"], dtype=np.float64),
        feature_names=obj["feature_names"],
    )


def save_explanations(em: ExplanationMatrix, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(explanation_to_json(em), fh, sort_keys=True, allow_nan=False)


def load_explanations(path) -> ExplanationMatrix:
    with open(path, encoding="utf-8") as fh:
        return explanation_from_json(json.load(fh))
