import numpy as np
import pytest

from confexplain.boosting import GBTParams, Tree, TreeEnsemble, fit_gbt_classifier
from confexplain.data import SplitSpec, make_synthetic, split
from confexplain.shapley import explain_batch


def make_stump(feature=0, threshold=0.5, left_value=-1.0, right_value=1.0,
               left_cover=50.0, right_cover=50.0):
    return Tree(
        feature=np.array([feature, -1, -1], dtype=np.int32),
        threshold=np.array([threshold, 0.0, 0.0]),
        left=np.array([1, -1, -1], dtype=np.int32),
        right=np.array([2, -1, -1], dtype=np.int32),
        value=np.array([0.0, left_value, right_value]),
        cover=np.array([left_cover + right_cover, left_cover, right_cover]),
    )


def make_ensemble(trees, n_features, base_score=0.0, learning_rate=1.0,
                  objective="squared-error"):
    return TreeEnsemble(
        objective=objective,
        base_score=base_score,
        learning_rate=learning_rate,
        n_classes=2 if objective == "logistic" else 0,
        n_features=n_features,
        trees=list(trees),
    )


def random_tree(rng, n_features, max_depth, n_rows=256):
    """Random tree with consistent cover counts (children sum to parent)."""
    feature, threshold, left, right, value, cover = [], [], [], [], [], []

    def grow(depth, rows):
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        cover.append(float(rows))
        if depth >= max_depth or rows < 2 or rng.random() < 0.25:
            value[idx] = float(rng.normal())
            return idx
        feature[idx] = int(rng.integers(n_features))
        threshold[idx] = float(rng.normal())
        rows_left = int(rng.integers(1, rows))
        left[idx] = grow(depth + 1, rows_left)
        right[idx] = grow(depth + 1, rows - rows_left)
        return idx

    grow(0, n_rows)
    return Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value),
        cover=np.asarray(cover),
    )


def random_ensemble(rng, n_trees, n_features, max_depth, learning_rate=None):
    trees = [random_tree(rng, n_features, max_depth) for _ in range(n_trees)]
    lr = float(rng.uniform(0.1, 1.0)) if learning_rate is None else learning_rate
    return make_ensemble(trees, n_features, base_score=float(rng.normal()), learning_rate=lr)


@pytest.fixture(scope="session")
def small_problem():
    """A fitted binary problem shared by the slower integration tests."""
    ds = make_synthetic(900, 6, 2, seed=17)
    train, calib, test = split(ds, SplitSpec(0.5, 0.25, 0.25, seed=17))
    bb = fit_gbt_classifier(train, GBTParams(n_estimators=80, max_depth=3), seed=0)
    truths = {}
    for tag, part in (("train", train), ("calib", calib), ("test", test)):
        truths[tag], _ = explain_batch(bb, part.features, feature_names=part.feature_names)
    return {
        "train": train,
        "calib": calib,
        "test": test,
        "blackbox": bb,
        "truths": truths,
    }
