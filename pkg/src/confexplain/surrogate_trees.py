"""Per-feature boosted-tree approximation of the explainer: one squared-error
regressor per explained feature, trained on instances augmented with the
black box's output."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .boosting import (
    GBTParams,
    TreeEnsemble,
    ensemble_from_json,
    ensemble_to_json,
    fit_gbt_regressor,
    predict_class,
    predict_margin,
    predict_proba,
)
from .errors import DimensionMismatch
from .shapley import ExplanationMatrix

PROBABILITY = "probability"
LABEL = "label"


def augment(X, bb: TreeEnsemble, mode=PROBABILITY):
    """Append the black box's output channel to every row.

    Probability mode appends sigmoid/softmax outputs (1 column binary,
    C columns multiclass); label mode appends the predicted class index.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != bb.n_features:
        raise DimensionMismatch(
            f"expected {bb.n_features} columns for augmentation, got {X.shape}"
        )
    if mode == LABEL:
        channel = predict_class(bb, X).astype(np.float64)[:, None]
    elif mode == PROBABILITY:
        proba = predict_proba(bb, X)
        channel = proba[:, None] if proba.ndim == 1 else proba
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return np.hstack([X, channel])


@dataclass
class PerFeatureSurrogate:
    regressors: list  # one TreeEnsemble per explained feature
    params: GBTParams
    mode: str
    feature_names: list

    @property
    def n_features(self):
        return len(self.regressors)

    def predict(self, X, bb: TreeEnsemble, timer=False):
        """Predicted importance scores; timing includes the augmentation pass."""
        start = time.perf_counter() if timer else 0.0
        X_aug = augment(X, bb, self.mode)
        values = np.empty((X_aug.shape[0], self.n_features))
        for f, reg in enumerate(self.regressors):
            values[:, f] = predict_margin(reg, X_aug)
        elapsed = (time.perf_counter() - start) if timer else 0.0
        matrix = ExplanationMatrix(values=values, feature_names=list(self.feature_names))
        return matrix, elapsed


def fit_per_feature_surrogate(
    dev_X,
    dev_Y: ExplanationMatrix,
    bb: TreeEnsemble,
    params: GBTParams,
    seed=0,
    mode=PROBABILITY,
    threads=1,
) -> PerFeatureSurrogate:
    """Fit one regressor per explained feature on the augmented dev set."""
    dev_X = np.asarray(dev_X, dtype=np.float64)
    targets = dev_Y.values
    if targets.shape[0] != dev_X.shape[0]:
        raise DimensionMismatch(
            f"{targets.shape[0]} explanation rows for {dev_X.shape[0]} instances"
        )
    X_aug = augment(dev_X, bb, mode)

    def fit_one(f):
        return fit_gbt_regressor(X_aug, targets[:, f], params, seed=seed + f)

    n_feat = targets.shape[1]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            regressors = list(pool.map(fit_one, range(n_feat)))
    else:
        regressors = [fit_one(f) for f in range(n_feat)]
    return PerFeatureSurrogate(
        regressors=regressors,
        params=params,
        mode=mode,
        feature_names=list(dev_Y.feature_names),
    )


def surrogate_to_json(s: PerFeatureSurrogate) -> dict:
    return {
        "kind": "per-feature-trees",
        "mode": s.mode,
        "feature_names": list(s.feature_names),
        "params": {
            "learning_rate": s.params.learning_rate,
            "n_estimators": s.params.n_estimators,
            "max_depth": s.params.max_depth,
            "l2_reg": s.params.l2_reg,
            "min_child_cover": s.params.min_child_cover,
        },
        "regressors": [ensemble_to_json(r) for r in s.regressors],
    }


def surrogate_from_json(obj: dict) -> PerFeatureSurrogate:
    return PerFeatureSurrogate(
        regressors=[ensemble_from_json(r) for r in obj["regressors"]],
        params=GBTParams(**obj["params"]),
        mode=obj["mode"],
        feature_names=obj["feature_names"],
    )


def save_surrogate(s: PerFeatureSurrogate, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(surrogate_to_json(s), fh, sort_keys=True, allow_nan=False)


def load_surrogate(path) -> PerFeatureSurrogate:
    with open(path, encoding="utf-8") as fh:
        return surrogate_from_json(json.load(fh))
