import numpy as np
import pytest

from conftest import make_ensemble, make_stump, random_ensemble
from confexplain.boosting import GBTParams, Tree, fit_gbt_classifier, predict_margin
from confexplain.data import make_synthetic
from confexplain.errors import TooManyFeatures
from confexplain.shapley import (
    brute_force_shapley,
    conditional_expectation,
    expected_value,
    explain_batch,
    explanation_from_json,
    explanation_to_json,
    shap_values,
    tree_shap,
)


def symmetric_xor_tree():
    """Depth-2 tree where features 0 and 1 are exchangeable."""
    return Tree(
        feature=np.array([0, 1, 1, -1, -1, -1, -1], dtype=np.int32),
        threshold=np.array([0.5, 0.5, 0.5, 0, 0, 0, 0], dtype=np.float64),
        left=np.array([1, 3, 5, -1, -1, -1, -1], dtype=np.int32),
        right=np.array([2, 4, 6, -1, -1, -1, -1], dtype=np.int32),
        value=np.array([0, 0, 0, 1.0, -1.0, -1.0, 1.0]),
        cover=np.array([100.0, 50.0, 50.0, 25.0, 25.0, 25.0, 25.0]),
    )


class TestExpectedValue:
    def test_empty_ensemble(self):
        ens = make_ensemble([], n_features=2, base_score=1.5)
        assert expected_value(ens) == 1.5

    def test_symmetric_stump(self):
        ens = make_ensemble([make_stump(0, 0.5, -1.0, 1.0, 50, 50)], n_features=1)
        assert expected_value(ens) == 0.0

    def test_weighted_stump(self):
        ens = make_ensemble([make_stump(0, 0.5, 0.0, 4.0, 25, 75)], n_features=1)
        assert expected_value(ens) == pytest.approx(3.0)


class TestConditionalExpectation:
    def test_full_subset_is_traversal(self):
        tree = make_stump(0, 0.5, -1.0, 1.0)
        assert conditional_expectation(tree, np.array([0.2]), {0}) == -1.0
        assert conditional_expectation(tree, np.array([0.9]), {0}) == 1.0

    def test_empty_subset_is_cover_weighted_mean(self):
        tree = make_stump(0, 0.5, 0.0, 4.0, 25, 75)
        assert conditional_expectation(tree, np.array([0.2]), set()) == pytest.approx(3.0)

    def test_absent_feature_ignored(self):
        tree = make_stump(0, 0.5, 0.0, 4.0, 25, 75)
        x = np.array([0.2, 9.0])
        assert conditional_expectation(tree, x, {1}) == conditional_expectation(tree, x, set())


class TestBruteForce:
    def test_stump_attribution(self):
        ens = make_ensemble([make_stump(0, 0.5, -1.0, 1.0, 50, 50)], n_features=3)
        iv = brute_force_shapley(ens, np.array([0.9, 0.0, 0.0]))
        assert iv.phi[0] == pytest.approx(1.0)
        assert iv.phi[1] == iv.phi[2] == 0.0

    def test_symmetry_axiom(self):
        ens = make_ensemble([symmetric_xor_tree()], n_features=2)
        iv = brute_force_shapley(ens, np.array([1.0, 1.0]))
        assert iv.phi[0] == pytest.approx(iv.phi[1])

    def test_dummy_axiom(self):
        ens = make_ensemble([make_stump(0, 0.5, -1.0, 1.0)], n_features=4)
        iv = brute_force_shapley(ens, np.array([0.1, 5.0, -3.0, 2.0]))
        assert np.all(iv.phi[1:] == 0.0)

    def test_too_many_features(self):
        rng = np.random.default_rng(0)
        # depth-high random tree over 25 features will exceed the bound
        tree = None
        from conftest import random_tree

        for _ in range(50):
            cand = random_tree(rng, 25, 14, n_rows=4096)
            if len(set(cand.feature[cand.feature >= 0].tolist())) > 20:
                tree = cand
                break
        assert tree is not None
        ens = make_ensemble([tree], n_features=25)
        with pytest.raises(TooManyFeatures):
            brute_force_shapley(ens, np.zeros(25))


class TestTreeShap:
    def test_empty_ensemble(self):
        ens = make_ensemble([], n_features=3, base_score=0.25)
        iv = tree_shap(ens, np.zeros(3))
        assert np.all(iv.phi == 0.0)
        assert iv.base_value == 0.25

    def test_matches_oracle_on_random_ensembles(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            ens = random_ensemble(rng, n_trees=int(rng.integers(1, 8)), n_features=6, max_depth=4)
            for _ in range(4):
                x = rng.normal(size=6)
                fast = tree_shap(ens, x)
                oracle = brute_force_shapley(ens, x)
                np.testing.assert_allclose(fast.phi, oracle.phi, atol=1e-9)
                assert fast.base_value == pytest.approx(oracle.base_value, abs=1e-12)

    def test_duplicate_tree_doubles_contribution(self):
        stump = make_stump(0, 0.5, -1.0, 1.0, 30, 70)
        one = make_ensemble([stump], n_features=2)
        two = make_ensemble([stump, stump], n_features=2)
        x = np.array([0.9, 0.0])
        np.testing.assert_allclose(tree_shap(two, x).phi, 2 * tree_shap(one, x).phi, atol=1e-12)

    def test_local_accuracy_on_fitted_model(self):
        ds = make_synthetic(250, 5, 2, seed=11)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=25, max_depth=4), seed=0)
        X = ds.features[:40]
        phi = shap_values(ens, X)[:, 0, :]
        base = expected_value(ens)
        margins = predict_margin(ens, X)
        np.testing.assert_allclose(base + phi.sum(axis=1), margins, atol=1e-9)

    def test_multiclass_local_accuracy_and_oracle(self):
        ds = make_synthetic(150, 4, 3, seed=13)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=6, max_depth=3), seed=0)
        x = ds.features[3]
        vectors = tree_shap(ens, x)
        oracle = brute_force_shapley(ens, x)
        margins = predict_margin(ens, x)
        for c in range(3):
            np.testing.assert_allclose(vectors[c].phi, oracle[c].phi, atol=1e-9)
            assert vectors[c].base_value + vectors[c].phi.sum() == pytest.approx(
                margins[c], abs=1e-9
            )


class TestExplainBatch:
    def test_empty_batch(self):
        ens = make_ensemble([make_stump()], n_features=1)
        matrix, elapsed = explain_batch(ens, np.zeros((0, 1)))
        assert matrix.values.shape == (0, 1)
        assert elapsed >= 0.0

    def test_identical_rows_identical_attributions(self):
        ds = make_synthetic(120, 4, 2, seed=3)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=10, max_depth=3), seed=0)
        X = np.tile(ds.features[5], (4, 1))
        matrix, _ = explain_batch(ens, X)
        for i in range(1, 4):
            np.testing.assert_array_equal(matrix.values[0], matrix.values[i])

    def test_batch_rows_match_single_calls(self):
        ds = make_synthetic(120, 4, 2, seed=4)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=10, max_depth=3), seed=0)
        X = ds.features[:6]
        matrix, _ = explain_batch(ens, X)
        for i in range(6):
            np.testing.assert_allclose(matrix.values[i], tree_shap(ens, X[i]).phi, atol=1e-12)

    def test_multiclass_batch_uses_predicted_class(self):
        ds = make_synthetic(150, 4, 3, seed=7)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=6, max_depth=3), seed=0)
        X = ds.features[:8]
        matrix, _ = explain_batch(ens, X)
        margins = predict_margin(ens, X)
        picked = margins.argmax(axis=1)
        for i in range(8):
            iv = tree_shap(ens, X[i])[picked[i]]
            np.testing.assert_allclose(matrix.values[i], iv.phi, atol=1e-12)
            assert matrix.base_values[i] == pytest.approx(iv.base_value)

    def test_json_round_trip(self):
        ds = make_synthetic(60, 3, 2, seed=5)
        ens = fit_gbt_classifier(ds, GBTParams(n_estimators=5, max_depth=2), seed=0)
        matrix, _ = explain_batch(ens, ds.features[:10])
        back = explanation_from_json(explanation_to_json(matrix))
        assert back.values.tobytes() == matrix.values.tobytes()
        assert back.base_values.tobytes() == matrix.base_values.tobytes()
