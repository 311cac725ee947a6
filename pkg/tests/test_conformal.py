import numpy as np
import pytest

from conftest import make_ensemble
from confexplain.boosting import GBTParams
from confexplain.conformal import (
    ADDITIVE,
    ALL_KINDS,
    EXPONENTIAL,
    ClassGaussians,
    ConformalExplainer,
    calibrate_explainer,
    calibrate_threshold,
    difficulty,
    estimator_from_json,
    estimator_to_json,
    fit_class_gaussians,
    fit_difficulty_estimator,
    knn_distance,
    knn_lambda,
    knn_label_std,
    mahalanobis,
    nonconformity,
    predict_interval,
    predict_intervals,
)
from confexplain.data import Dataset, make_synthetic
from confexplain.errors import (
    CalibrationTooSmall,
    ClassTooSmall,
    KTooLarge,
    NotCalibrated,
)
from confexplain.shapley import ExplanationMatrix
from confexplain.surrogate_trees import fit_per_feature_surrogate


def enumeration_oracle(scores, epsilon):
    """Literal positional scan of the sorted score multiset."""
    ordered = sorted(scores)
    n = len(ordered)
    for j, a in enumerate(ordered):
        if (j + 1) / (n + 1) >= 1 - epsilon:
            return a
    return None


class StubSurrogate:
    """Returns a fixed prediction matrix regardless of input."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, X, bb, timer=False):
        rows = np.asarray(X).shape[0]
        out = self.values if len(self.values) == rows else np.tile(self.values[0], (rows, 1))
        return ExplanationMatrix(values=out, feature_names=[f"f{j}" for j in range(out.shape[1])]), 0.0


class FixedSigma:
    """Difficulty stub with a controllable constant."""

    def __init__(self, value):
        self.value = value
        self.kind = "stub"

    def sigma(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


class TestKnnDistance:
    def test_query_equal_to_single_row(self):
        assert knn_distance(np.array([1.0, 2.0]), np.array([[1.0, 2.0]]), k=1) == 0.0

    def test_sum_of_two_nearest(self):
        train = np.array([[1.0], [2.0], [5.0]])
        assert knn_distance(np.array([0.0]), train, k=2) == pytest.approx(3.0)

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            knn_distance(np.zeros(1), np.zeros((2, 1)), k=3)

    def test_self_exclusion_by_index(self):
        train = np.array([[0.0], [3.0]])
        assert knn_distance(train[0], train, k=1, exclude_index=0) == pytest.approx(3.0)


@pytest.fixture()
def knn_setup():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 3))
    labels = rng.normal(size=(40, 2))
    ds = Dataset(X, np.zeros(40, dtype=np.int64).tolist() * 1, ["a", "b", "c"], 1)
    truth = ExplanationMatrix(values=labels, feature_names=["a", "b"])
    est = fit_difficulty_estimator("knn-combined", ds, truth, k=5)
    return X, labels, est


class TestKnnNormalization:
    def test_lambda_matches_independent_computation(self, knn_setup):
        X, _, est = knn_setup
        rng = np.random.default_rng(8)
        queries = rng.normal(size=(6, 3))
        # independent oracle: sort full distance lists per row
        own = []
        for i in range(len(X)):
            d = np.sqrt(((X - X[i]) ** 2).sum(axis=1))
            d = np.delete(d, i)
            own.append(np.sort(d)[:5].sum())
        median = np.median(own)
        lam = knn_lambda(est, queries)
        for q, value in zip(queries, lam):
            d = np.sort(np.sqrt(((X - q) ** 2).sum(axis=1)))[:5].sum()
            assert value == pytest.approx(d / median, rel=1e-12)

    def test_lambda_zero_at_degenerate_query(self, knn_setup):
        X, _, est = knn_setup
        # a query whose 5 nearest rows coincide with it has raw distance 0
        stacked = np.tile(X[0], (6, 1))
        est2 = fit_difficulty_estimator(
            "knn-dist",
            Dataset(np.vstack([X, stacked]), np.zeros(46, dtype=np.int64), ["a", "b", "c"], 1),
            k=5,
        )
        assert knn_lambda(est2, X[0:1])[0] == 0.0

    def test_label_std_population_convention(self):
        # population std (divide by k) of neighbour targets {0, 1} is 0.5
        X = np.array([[0.0], [0.1], [10.0], [10.1]])
        targets = np.array([[0.0], [1.0], [0.0], [1.0]])
        ds = Dataset(X, np.zeros(4, dtype=np.int64), ["a"], 1)
        truth = ExplanationMatrix(values=targets, feature_names=["f"])
        est = fit_difficulty_estimator("knn-label-std", ds, truth, k=2)
        # independent oracle: per training row, std of the self-excluded 2-NN targets
        own = []
        for i in range(4):
            d = np.abs(X[:, 0] - X[i, 0])
            d[i] = np.inf
            nbrs = np.argsort(d)[:2]
            own.append(np.std(targets[nbrs, 0]))
        assert own[0] == pytest.approx(0.5)  # neighbour targets {0, 1}
        assert est.label_medians[0] == pytest.approx(np.median(own))
        xi = knn_label_std(est, np.array([[0.05], [10.05]]), 0)
        np.testing.assert_allclose(xi, 0.5 / np.median(own))

    def test_label_std_zero_when_neighbours_agree(self, knn_setup):
        X, labels, est = knn_setup
        clone = labels.copy()
        clone[:, 0] = np.where(X[:, 0] > 0, 3.0, -3.0)  # locally constant targets
        # direct population-std check of the building block
        idx, _ = est._knn_neighbors(X[:1])
        member = clone[idx[0], 0]
        if np.all(member == member[0]):
            assert member.std() == 0.0


class TestClassGaussians:
    def test_means_recovered(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(400, 3)) + np.array([2.0, -1.0, 0.5])
        ds = Dataset(X, np.zeros(400, dtype=np.int64), ["a", "b", "c"], 1)
        g = fit_class_gaussians(ds)
        np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
        assert abs(g.means[0][0] - 2.0) < 0.2

    def test_single_row_class_rejected(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        ds = Dataset(X, np.array([0, 0, 1]), ["a", "b"], 2)
        with pytest.raises(ClassTooSmall):
            fit_class_gaussians(ds)

    def test_constant_column_still_positive_definite(self):
        rng = np.random.default_rng(4)
        X = np.c_[rng.normal(size=30), np.full(30, 7.0)]
        ds = Dataset(X, np.zeros(30, dtype=np.int64), ["a", "b"], 1)
        g = fit_class_gaussians(ds)
        d = mahalanobis(np.array([0.0, 9.0]), 0, g)
        assert np.isfinite(d) and d >= 0


class TestMahalanobis:
    def test_zero_at_mean(self):
        g = ClassGaussians(
            classes=np.array([0]), means=np.array([[1.0, 2.0]]),
            chol=[np.eye(2)], ridges=np.array([0.0]),
        )
        assert mahalanobis(np.array([1.0, 2.0]), 0, g) == 0.0

    def test_euclidean_with_identity_covariance(self):
        g = ClassGaussians(
            classes=np.array([0]), means=np.array([[0.0, 0.0]]),
            chol=[np.eye(2)], ridges=np.array([0.0]),
        )
        assert mahalanobis(np.array([3.0, 4.0]), 0, g) == pytest.approx(5.0)

    def test_diagonal_covariance(self):
        g = ClassGaussians(
            classes=np.array([0]), means=np.array([[0.0, 0.0]]),
            chol=[np.diag([2.0, 1.0])], ridges=np.array([0.0]),
        )
        assert mahalanobis(np.array([2.0, 1.0]), 0, g) == pytest.approx(np.sqrt(2.0))


class TestDifficulty:
    def test_pred_conf_at_half_probability(self):
        bb = make_ensemble([], n_features=2, base_score=0.0, objective="logistic")
        ds = make_synthetic(40, 2, 2, seed=0)
        est = fit_difficulty_estimator("pred-conf", ds, blackbox=bb)
        assert difficulty(est, np.zeros((1, 2)))[0] == 1.0

    def test_pred_conf_at_certainty(self):
        bb = make_ensemble([], n_features=2, base_score=100.0, objective="logistic")
        ds = make_synthetic(40, 2, 2, seed=0)
        est = fit_difficulty_estimator("pred-conf", ds, blackbox=bb)
        assert difficulty(est, np.zeros((1, 2)))[0] == pytest.approx(0.5)

    def test_min_dist_log_identity(self):
        est = fit_difficulty_estimator("min-dist", make_synthetic(60, 2, 2, seed=1))
        est.gaussians = ClassGaussians(
            classes=np.array([0]), means=np.array([[0.0, 0.0]]),
            chol=[np.eye(2)], ridges=np.array([0.0]),
        )
        x = np.array([[np.e - 1.0, 0.0]])
        assert difficulty(est, x)[0] == pytest.approx(1.0)

    def test_floor_applies(self):
        est = fit_difficulty_estimator("min-dist", make_synthetic(60, 2, 2, seed=1))
        est.gaussians = ClassGaussians(
            classes=np.array([0]), means=np.array([[0.0, 0.0]]),
            chol=[np.eye(2)], ridges=np.array([0.0]),
        )
        assert difficulty(est, np.zeros((1, 2)))[0] == est.beta  # log(1) floored

    def test_exponential_with_zero_gamma_is_unnormalized(self):
        ds = make_synthetic(50, 3, 2, seed=2)
        est = fit_difficulty_estimator("knn-dist", ds, k=5, gamma=0.0, form=EXPONENTIAL)
        sig = difficulty(est, ds.features[:8])
        np.testing.assert_array_equal(sig, np.ones(8))

    def test_avg_dist_is_mean_over_classes(self):
        ds = make_synthetic(80, 2, 2, seed=3)
        est = fit_difficulty_estimator("avg-dist", ds)
        from confexplain.conformal import mahalanobis_all

        X = ds.features[:5]
        expected = np.maximum(np.log(mahalanobis_all(X, est.gaussians).mean(axis=1) + 1), est.beta)
        np.testing.assert_allclose(difficulty(est, X), expected)


class TestNonconformity:
    def test_exact_prediction(self):
        assert nonconformity(1.0, 1.0, 2.0) == 0.0

    def test_additive_denominator(self):
        assert nonconformity(2.0, 1.0, 2.0) == pytest.approx(0.5)

    def test_unnormalized_case(self):
        assert nonconformity(0.5, 0.2, 1.0) == pytest.approx(0.3)


class TestCalibrateThreshold:
    def test_nineteen_scores(self):
        scores = list(range(1, 20))
        assert calibrate_threshold(scores, 0.05) == 19.0

    def test_all_ties(self):
        assert calibrate_threshold([5.0, 5.0, 5.0], 0.25) == 5.0

    def test_too_small(self):
        with pytest.raises(CalibrationTooSmall):
            calibrate_threshold([1, 2, 3, 4, 5], 0.05)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(3, 60))
            scores = np.round(rng.exponential(size=n), int(rng.integers(0, 3)))
            eps = float(rng.uniform(1.0 / (n + 1) + 1e-9, 0.9))
            expected = enumeration_oracle(scores, eps)
            if expected is None:
                with pytest.raises(CalibrationTooSmall):
                    calibrate_threshold(scores, eps)
            else:
                assert calibrate_threshold(scores, eps) == expected


class TestCalibrateExplainer:
    def test_perfect_surrogate_degenerate_intervals(self, small_problem):
        calib = small_problem["calib"]
        truth = small_problem["truths"]["calib"]
        bb = small_problem["blackbox"]
        sur = StubSurrogate(truth.values)
        est = fit_difficulty_estimator("none", small_problem["train"])
        ce = calibrate_explainer(sur, est, calib, truth, bb, [0.1])
        assert np.all(ce.thresholds[0.1] == 0.0)
        points, lo, hi, _ = predict_intervals(ce, calib.features, 0.1)
        np.testing.assert_array_equal(lo, points)
        np.testing.assert_array_equal(hi, points)

    def test_none_kind_equals_raw_quantiles(self, small_problem):
        calib = small_problem["calib"]
        truth = small_problem["truths"]["calib"]
        bb = small_problem["blackbox"]
        sur = fit_per_feature_surrogate(
            small_problem["train"].features, small_problem["truths"]["train"], bb,
            GBTParams(n_estimators=20, max_depth=2), seed=0,
        )
        est = fit_difficulty_estimator("none", small_problem["train"])
        ce = calibrate_explainer(sur, est, calib, truth, bb, [0.1])
        pred, _ = sur.predict(calib.features, bb)
        resid = np.abs(truth.values - pred.values)
        for f in range(resid.shape[1]):
            assert ce.thresholds[0.1][f] == calibrate_threshold(resid[:, f], 0.1)

    def test_residual_scaling_scales_thresholds(self):
        rng = np.random.default_rng(5)
        n = 60
        base = rng.normal(size=n)
        truth = ExplanationMatrix(values=np.c_[10 * base, base], feature_names=["a", "b"])
        calib = Dataset(rng.normal(size=(n, 2)), np.zeros(n, dtype=np.int64), ["a", "b"], 1)
        sur = StubSurrogate(np.zeros((n, 2)))
        est = fit_difficulty_estimator("none", calib)
        bb = make_ensemble([], n_features=2, objective="logistic")
        ce = calibrate_explainer(sur, est, calib, truth, bb, [0.1])
        assert ce.thresholds[0.1][0] == pytest.approx(10 * ce.thresholds[0.1][1], rel=1e-12)


class TestPredictInterval:
    def make_ce(self, threshold, sigma=1.0):
        return ConformalExplainer(
            surrogate=StubSurrogate(np.array([[0.5]])),
            blackbox=make_ensemble([], n_features=1, objective="logistic"),
            estimator=FixedSigma(sigma),
            thresholds={0.1: np.array([threshold])},
            n_calib=50,
            feature_names=["f0"],
        )

    def test_interval_arithmetic(self):
        iv = predict_interval(self.make_ce(0.1), np.zeros(1), 0.1)
        assert iv.lo[0] == pytest.approx(0.4)
        assert iv.hi[0] == pytest.approx(0.6)

    def test_zero_threshold_degenerate(self):
        iv = predict_interval(self.make_ce(0.0), np.zeros(1), 0.1)
        assert iv.lo[0] == iv.hi[0] == 0.5

    def test_width_linear_in_sigma(self):
        iv1 = predict_interval(self.make_ce(0.1, sigma=1.0), np.zeros(1), 0.1)
        iv2 = predict_interval(self.make_ce(0.1, sigma=2.0), np.zeros(1), 0.1)
        assert (iv2.hi[0] - iv2.lo[0]) == pytest.approx(2 * (iv1.hi[0] - iv1.lo[0]))

    def test_not_calibrated(self):
        with pytest.raises(NotCalibrated):
            predict_interval(self.make_ce(0.1), np.zeros(1), 0.2)


class TestInvariants:
    def test_epsilon_monotone_thresholds(self, small_problem):
        bb = small_problem["blackbox"]
        sur = fit_per_feature_surrogate(
            small_problem["train"].features, small_problem["truths"]["train"], bb,
            GBTParams(n_estimators=15, max_depth=2), seed=0,
        )
        for kind in ALL_KINDS:
            est = fit_difficulty_estimator(
                kind, small_problem["train"], small_problem["truths"]["train"], bb, k=10
            )
            ce = calibrate_explainer(
                sur, est, small_problem["calib"], small_problem["truths"]["calib"], bb,
                [0.05, 0.1, 0.2],
            )
            assert np.all(ce.thresholds[0.05] >= ce.thresholds[0.1])
            assert np.all(ce.thresholds[0.1] >= ce.thresholds[0.2])

    def test_none_kind_width_constant_across_instances(self, small_problem):
        bb = small_problem["blackbox"]
        sur = fit_per_feature_surrogate(
            small_problem["train"].features, small_problem["truths"]["train"], bb,
            GBTParams(n_estimators=15, max_depth=2), seed=0,
        )
        est = fit_difficulty_estimator("none", small_problem["train"])
        ce = calibrate_explainer(
            sur, est, small_problem["calib"], small_problem["truths"]["calib"], bb, [0.1]
        )
        _, lo, hi, _ = predict_intervals(ce, small_problem["test"].features, 0.1)
        widths = hi - lo
        # (point + h) - (point - h) re-rounds per instance; constancy holds to ulp
        assert float(np.ptp(widths, axis=0).max()) < 1e-12

    def test_large_gamma_limit_width_ratio_one(self, small_problem):
        bb = small_problem["blackbox"]
        sur = fit_per_feature_surrogate(
            small_problem["train"].features, small_problem["truths"]["train"], bb,
            GBTParams(n_estimators=15, max_depth=2), seed=0,
        )
        est = fit_difficulty_estimator(
            "knn-dist", small_problem["train"], k=10, gamma=1e6, form=ADDITIVE
        )
        ce = calibrate_explainer(
            sur, est, small_problem["calib"], small_problem["truths"]["calib"], bb, [0.1]
        )
        _, lo, hi, _ = predict_intervals(ce, small_problem["test"].features[:20], 0.1)
        widths = hi - lo
        ratios = widths / widths[0][None, :]
        np.testing.assert_allclose(ratios, 1.0, atol=1e-4)

    def test_estimator_json_round_trip(self, small_problem):
        bb = small_problem["blackbox"]
        train = small_problem["train"]
        truth = small_problem["truths"]["train"]
        for kind in ALL_KINDS:
            est = fit_difficulty_estimator(kind, train, truth, bb, k=8)
            obj = estimator_to_json(est, "ds.json", "truth.json", "bb.json")
            back = estimator_from_json(
                obj, train_X=train.features, truth_values=truth.values, blackbox=bb
            )
            X = small_problem["test"].features[:10]
            np.testing.assert_array_equal(est.sigma(X), back.sigma(X))
