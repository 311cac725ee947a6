import json

import numpy as np
import pytest

from conftest import make_ensemble, make_stump
from confexplain.boosting import (
    GBTParams,
    ensemble_from_json,
    ensemble_to_json,
    fit_gbt_classifier,
    fit_gbt_regressor,
    grid_search,
    load_ensemble,
    predict_class,
    predict_margin,
    predict_proba,
    save_ensemble,
)
from confexplain.data import Dataset, make_synthetic
from confexplain.errors import DimensionMismatch


def traverse_reference(tree, x):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


class TestPredict:
    def test_empty_ensemble_returns_base(self):
        ens = make_ensemble([], n_features=3, base_score=0.7)
        assert predict_margin(ens, np.zeros(3)) == 0.7

    def test_single_stump_traversal(self):
        ens = make_ensemble([make_stump(0, 0.5, -1.0, 1.0)], n_features=1)
        assert predict_margin(ens, np.array([0.7])) == 1.0
        assert predict_margin(ens, np.array([0.5])) == -1.0  # rule is x <= threshold

    def test_sigmoid_values(self):
        ens = make_ensemble([], n_features=1, base_score=0.0, objective="logistic")
        ens.n_classes = 2
        assert predict_proba(ens, np.zeros(1)) == 0.5
        ens2 = make_ensemble([], n_features=1, base_score=2.0, objective="logistic")
        assert predict_proba(ens2, np.zeros(1)) == pytest.approx(0.8807970779778823, abs=1e-9)

    def test_multiclass_margins_and_softmax(self):
        ds = make_synthetic(120, 3, 3, seed=0)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=5, max_depth=2), seed=0)
        margins = predict_margin(ens, ds.features[:7])
        assert margins.shape == (7, 3)
        proba = predict_proba(ens, ds.features[:7])
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_softmax_at_zero_margins(self):
        ens = make_ensemble([], n_features=2, objective="multiclass-softmax")
        ens.n_classes = 3
        proba = predict_proba(ens, np.zeros(2))
        assert np.allclose(proba, [1 / 3, 1 / 3, 1 / 3])

    def test_dimension_mismatch(self):
        ens = make_ensemble([make_stump()], n_features=1)
        with pytest.raises(DimensionMismatch):
            predict_margin(ens, np.zeros(4))


class TestFitClassifier:
    def test_single_class_rejected(self):
        ds = Dataset(np.random.default_rng(0).normal(size=(20, 2)), np.zeros(20, dtype=int), ["a", "b"], 2)
        with pytest.raises(ValueError):
            fit_gbt_classifier(ds, GBTParams(n_estimators=5), seed=0)

    def test_blobs_reach_perfect_training_accuracy(self):
        ds = make_synthetic(200, 2, 2, seed=1)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=50, max_depth=3), seed=0)
        acc = (predict_class(ens, ds.features) == ds.labels).mean()
        assert acc == 1.0

    def test_zero_estimators_constant_model(self):
        ds = make_synthetic(50, 2, 2, seed=0)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=0), seed=0)
        margins = predict_margin(ens, ds.features)
        assert np.all(margins == ens.base_score)

    def test_training_loss_monotone(self):
        ds = make_synthetic(300, 4, 2, seed=3)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=40, max_depth=3), seed=0)
        losses = ens.training_loss
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_multiclass_training_loss_monotone(self):
        ds = make_synthetic(200, 3, 4, seed=5)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=25, max_depth=3), seed=0)
        losses = ens.training_loss
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_determinism(self):
        ds = make_synthetic(150, 3, 2, seed=2)
        a = fit_gbt_classifier(ds, GBTParams(n_estimators=10, max_depth=3), seed=0)
        b = fit_gbt_classifier(ds, GBTParams(n_estimators=10, max_depth=3), seed=0)
        assert ensemble_to_json(a) == ensemble_to_json(b)

    def test_cover_conservation(self):
        ds = make_synthetic(200, 4, 2, seed=4)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=10, max_depth=4), seed=0)
        for tree in ens.trees:
            assert tree.cover[0] == 200
            for i in range(tree.n_nodes):
                if tree.feature[i] >= 0:
                    assert tree.cover[i] == tree.cover[tree.left[i]] + tree.cover[tree.right[i]]

    def test_additivity_vs_independent_traversal(self):
        ds = make_synthetic(180, 4, 2, seed=6)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=12, max_depth=4), seed=0)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 4))
        margins = predict_margin(ens, X)
        for i in range(30):
            expected = ens.base_score + ens.learning_rate * sum(
                traverse_reference(t, X[i]) for t in ens.trees
            )
            assert margins[i] == pytest.approx(expected, abs=1e-12)


class TestFitRegressor:
    def test_constant_target(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 3))
        y = np.full(50, 3.25)
        ens = fit_gbt_regressor(X, y, GBTParams(n_estimators=10, max_depth=2), seed=0)
        assert np.allclose(predict_margin(ens, X), 3.25, atol=1e-9)

    def test_step_function_exact(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(100, 2))
        y = np.where(X[:, 0] <= 0.3, -1.0, 2.0)
        ens = fit_gbt_regressor(X, y, GBTParams(n_estimators=100, max_depth=1, learning_rate=0.3), seed=0)
        mse = np.mean((predict_margin(ens, X) - y) ** 2)
        assert mse < 1e-9

    def test_training_mse_monotone(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(120, 3))
        y = X[:, 0] * 2 + np.sin(X[:, 1])
        ens = fit_gbt_regressor(X, y, GBTParams(n_estimators=30, max_depth=3), seed=0)
        losses = ens.training_loss
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_empty_target_rejected(self):
        with pytest.raises(DimensionMismatch):
            fit_gbt_regressor(np.zeros((0, 2)), np.zeros(0), GBTParams(n_estimators=1), seed=0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            fit_gbt_regressor(np.zeros((5, 2)), np.zeros(4), GBTParams(n_estimators=1), seed=0)


def xor_dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(n, 2)).astype(float)
    y = (X[:, 0].astype(int) ^ X[:, 1].astype(int)).astype(np.int64)
    return Dataset(X, y, ["a", "b"], 2)


class TestGridSearch:
    def test_single_point(self):
        ds = make_synthetic(80, 2, 2, seed=0)
        only = GBTParams(n_estimators=5)
        assert grid_search(ds, ds, [only], seed=0) is only

    def test_xor_needs_depth(self):
        train = xor_dataset(seed=1)
        calib = xor_dataset(seed=2)
        shallow = GBTParams(n_estimators=30, max_depth=1)
        deep = GBTParams(n_estimators=30, max_depth=4)
        assert grid_search(train, calib, [shallow, deep], seed=0) is deep

    def test_tie_keeps_grid_order(self):
        ds = make_synthetic(80, 2, 2, seed=0)
        a = GBTParams(n_estimators=5, max_depth=2)
        b = GBTParams(n_estimators=5, max_depth=2)
        assert grid_search(ds, ds, [a, b], seed=0) is a


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = make_synthetic(150, 3, 2, seed=8)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=8, max_depth=3), seed=0)
        path = tmp_path / "ens.json"
        save_ensemble(ens, path)
        back = load_ensemble(path)
        for a, b in zip(ens.trees, back.trees):
            assert a.value.tobytes() == b.value.tobytes()
            assert a.threshold.tobytes() == b.threshold.tobytes()
            assert np.array_equal(a.feature, b.feature)
            assert np.array_equal(a.cover, b.cover)
        X = ds.features[:20]
        assert np.array_equal(predict_margin(ens, X), predict_margin(back, X))

    def test_json_has_explicit_node_ids(self):
        ens = make_ensemble([make_stump()], n_features=1)
        obj = ensemble_to_json(ens)
        ids = [nd["id"] for nd in obj["trees"][0]["nodes"]]
        assert ids == [0, 1, 2]
        back = ensemble_from_json(json.loads(json.dumps(obj)))
        assert predict_margin(back, np.array([0.2])) == -1.0
