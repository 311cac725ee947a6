"""Inductive conformal regression over surrogate explanations.

Every explained feature is its own regression problem: residuals against
the ground-truth explainer are turned into non-conformity scores on the
calibration split, optionally normalized by a per-instance difficulty
estimate, and the per-feature score quantile bounds the error at the
requested significance level.

Difficulty estimators:
  none           constant 1 (fixed-width intervals)
  knn-dist       summed distance to the k nearest training rows / median
  knn-label-std  std of the neighbours' per-feature importance labels / median
  knn-combined   both of the above
  min-dist       log(1 + min Mahalanobis distance to any class Gaussian)
  avg-dist       log(1 + mean Mahalanobis distance over class Gaussians)
  pred-conf      1 - max class probability (1 - |p - 0.5| for binary)

Every sigma is floored at beta so calibration never divides by zero and
intervals never collapse from a zero estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .boosting import LOGISTIC, TreeEnsemble, predict_proba
from .data import Dataset
from .errors import (
    CalibrationTooSmall,
    ClassTooSmall,
    DegenerateMedian,
    DimensionMismatch,
    KTooLarge,
    NotCalibrated,
)
from .shapley import ExplanationMatrix

KIND_NONE = "none"
KIND_KNN_DIST = "knn-dist"
KIND_KNN_LABEL_STD = "knn-label-std"
KIND_KNN_COMBINED = "knn-combined"
KIND_MIN_DIST = "min-dist"
KIND_AVG_DIST = "avg-dist"
KIND_PRED_CONF = "pred-conf"

ALL_KINDS = (
    KIND_NONE,
    KIND_KNN_DIST,
    KIND_KNN_LABEL_STD,
    KIND_KNN_COMBINED,
    KIND_MIN_DIST,
    KIND_AVG_DIST,
    KIND_PRED_CONF,
)

ADDITIVE = "additive"
EXPONENTIAL = "exponential"

BETA_FLOOR = 1e-3
DEFAULT_K = 25


def _pairwise_distances(A, B):
    sq = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def knn_distance(x, train, k, exclude_index=None):
    """Sum of Euclidean distances from x to its k nearest training rows."""
    train = np.asarray(train, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dists = np.sqrt(np.sum((train - x[None, :]) ** 2, axis=1))
    if exclude_index is not None:
        dists = np.delete(dists, exclude_index)
    if k > len(dists):
        raise KTooLarge(f"k={k} exceeds {len(dists)} available training rows")
    return float(np.sort(dists)[:k].sum())


@dataclass
class ClassGaussians:
    """Class-conditional Gaussian fits with ridge-regularized covariances."""

    classes: np.ndarray
    means: np.ndarray  # (C, d)
    chol: list  # lower Cholesky factor per class
    ridges: np.ndarray  # (C,)

    @property
    def n_classes(self):
        return len(self.classes)


def fit_class_gaussians(train: Dataset) -> ClassGaussians:
    """One Gaussian per class: MLE mean and covariance plus a trace-scaled ridge."""
    X, y = train.features, train.labels
    d = X.shape[1]
    classes = np.unique(y)
    means, chols, ridges = [], [], []
    for c in classes:
        rows = X[y == c]
        if len(rows) < 2:
            raise ClassTooSmall(f"class {c} has {len(rows)} row(s), need at least 2")
        mu = rows.mean(axis=0)
        cov = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1))
        ridge = max(1e-6 * np.trace(cov) / d, 1e-9)
        chols.append(np.linalg.cholesky(cov + ridge * np.eye(d)))
        means.append(mu)
        ridges.append(ridge)
    return ClassGaussians(
        classes=classes,
        means=np.asarray(means),
        chol=chols,
        ridges=np.asarray(ridges),
    )


def mahalanobis(x, class_index, g: ClassGaussians) -> float:
    """Mahalanobis distance from x to the Gaussian of one class."""
    x = np.asarray(x, dtype=np.float64)
    z = solve_triangular(g.chol[class_index], x - g.means[class_index], lower=True)
    return float(np.sqrt(np.dot(z, z)))


def mahalanobis_all(X, g: ClassGaussians):
    """Distances of every row to every class Gaussian; shape (n, C)."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], g.n_classes))
    for i in range(g.n_classes):
        z = solve_triangular(g.chol[i], (X - g.means[i]).T, lower=True)
        out[:, i] = np.sqrt(np.sum(z**2, axis=0))
    return out


@dataclass
class DifficultyEstimator:
    kind: str
    k: int = DEFAULT_K
    gamma: float = 1.0
    rho: float = 1.0
    form: str = ADDITIVE
    beta: float = BETA_FLOOR
    # fitted state
    train_X: np.ndarray = None
    d_median: float = None
    label_medians: np.ndarray = None  # (F,)
    train_labels: np.ndarray = None  # (m, F) ground-truth importances
    gaussians: ClassGaussians = None
    blackbox: TreeEnsemble = None
    n_explained: int = None

    @property
    def per_feature(self):
        return self.kind in (KIND_KNN_LABEL_STD, KIND_KNN_COMBINED)

    def _knn_neighbors(self, X):
        dists = _pairwise_distances(np.asarray(X, dtype=np.float64), self.train_X)
        idx = np.argpartition(dists, self.k - 1, axis=1)[:, : self.k]
        ndists = np.take_along_axis(dists, idx, axis=1)
        return idx, ndists

    def _lambda(self, X):
        _, ndists = self._knn_neighbors(X)
        if self.d_median == 0:
            raise DegenerateMedian("median training kNN distance is zero")
        return ndists.sum(axis=1) / self.d_median

    def _xi(self, X):
        idx, _ = self._knn_neighbors(X)
        stds = self.train_labels[idx].std(axis=1)  # population std over k neighbours
        if np.any(self.label_medians == 0):
            raise DegenerateMedian("a per-feature median label std is zero")
        return stds / self.label_medians[None, :]

    def sigma(self, X):
        """Difficulty of each row, floored at beta.

        Shape (n,) for shared kinds, (n, n_explained) for per-feature kinds.
        """
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if self.kind == KIND_NONE:
            raw = np.ones(n)
        elif self.kind == KIND_MIN_DIST:
            raw = np.log(mahalanobis_all(X, self.gaussians).min(axis=1) + 1.0)
        elif self.kind == KIND_AVG_DIST:
            raw = np.log(mahalanobis_all(X, self.gaussians).mean(axis=1) + 1.0)
        elif self.kind == KIND_PRED_CONF:
            proba = predict_proba(self.blackbox, X)
            if self.blackbox.objective == LOGISTIC:
                raw = 1.0 - np.abs(proba - 0.5)
            else:
                raw = 1.0 - proba.max(axis=1)
        elif self.kind == KIND_KNN_DIST:
            lam = self._lambda(X)
            raw = self.gamma + lam if self.form == ADDITIVE else np.exp(self.gamma * lam)
        elif self.kind == KIND_KNN_LABEL_STD:
            xi = self._xi(X)
            raw = self.gamma + xi if self.form == ADDITIVE else np.exp(self.gamma * xi)
        elif self.kind == KIND_KNN_COMBINED:
            lam = self._lambda(X)[:, None]
            xi = self._xi(X)
            if self.form == ADDITIVE:
                raw = self.gamma + lam + xi
            else:
                raw = np.exp(self.gamma * lam) + np.exp(self.rho * xi)
        else:
            raise ValueError(f"unknown difficulty kind {self.kind!r}")
        return np.maximum(raw, self.beta)


def fit_difficulty_estimator(
    kind,
    train: Dataset,
    truth_train: ExplanationMatrix = None,
    blackbox: TreeEnsemble = None,
    k=DEFAULT_K,
    gamma=1.0,
    rho=1.0,
    form=ADDITIVE,
    beta=BETA_FLOOR,
) -> DifficultyEstimator:
    """Fit the requested difficulty estimate on the training split.

    KNN statistics (distance median, per-feature label-std medians) are
    computed with each training row's exact self-match excluded.
    """
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown difficulty kind {kind!r}")
    if form not in (ADDITIVE, EXPONENTIAL):
        raise ValueError(f"unknown form {form!r}")
    est = DifficultyEstimator(kind=kind, k=k, gamma=gamma, rho=rho, form=form, beta=beta)
    est.n_explained = truth_train.values.shape[1] if truth_train is not None else None

    if kind in (KIND_MIN_DIST, KIND_AVG_DIST):
        est.gaussians = fit_class_gaussians(train)
    elif kind == KIND_PRED_CONF:
        if blackbox is None:
            raise ValueError("pred-conf requires the fitted black box")
        est.blackbox = blackbox
    elif kind in (KIND_KNN_DIST, KIND_KNN_LABEL_STD, KIND_KNN_COMBINED):
        X = train.features
        m = X.shape[0]
        est.k = min(k, m - 1)
        if est.k < 1:
            raise KTooLarge("kNN difficulty needs at least 2 training rows")
        dists = _pairwise_distances(X, X)
        np.fill_diagonal(dists, np.inf)
        idx = np.argpartition(dists, est.k - 1, axis=1)[:, : est.k]
        ndists = np.take_along_axis(dists, idx, axis=1)
        est.train_X = X.copy()
        est.d_median = float(np.median(ndists.sum(axis=1)))
        if kind in (KIND_KNN_LABEL_STD, KIND_KNN_COMBINED):
            if truth_train is None:
                raise ValueError(f"{kind} requires the training-split ground truth")
            labels = truth_train.values
            stds = labels[idx].std(axis=1)
            est.label_medians = np.median(stds, axis=0)
            est.train_labels = labels.copy()
            if np.any(est.label_medians == 0):
                raise DegenerateMedian(
                    "per-feature median of neighbour label stds is zero"
                )
        if kind in (KIND_KNN_DIST, KIND_KNN_COMBINED) and est.d_median == 0:
            raise DegenerateMedian("median training kNN distance is zero")
    return est


def difficulty(estimator: DifficultyEstimator, X):
    """Spec-level wrapper: sigma values for a batch of instances."""
    return estimator.sigma(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def knn_lambda(estimator: DifficultyEstimator, X):
    """Normalized kNN distance of each row (raw distance / training median)."""
    return estimator._lambda(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def knn_label_std(estimator: DifficultyEstimator, X, feature):
    """Normalized label-std of each row's neighbourhood for one feature."""
    return estimator._xi(np.atleast_2d(np.asarray(X, dtype=np.float64)))[:, feature]


def nonconformity(y_true, y_pred, sigma):
    """Normalized absolute error |y - y_hat| / sigma."""
    return np.abs(np.asarray(y_true, dtype=np.float64) - np.asarray(y_pred, dtype=np.float64)) / sigma


def calibrate_threshold(scores, epsilon) -> float:
    """Smallest calibration score bounding new scores with probability 1 - epsilon.

    Equals the k-th order statistic of the score multiset where k is the
    smallest rank with k/(n+1) >= 1 - epsilon; ties follow the positional
    enumeration over the sorted multiset.
    """
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(scores)
    level = 1.0 - epsilon
    k = int(math.ceil(level * (n + 1)))
    while k > 1 and (k - 1) / (n + 1) >= level:
        k -= 1
    while k <= n and k / (n + 1) < level:
        k += 1
    if k > n:
        raise CalibrationTooSmall(
            f"{n} calibration scores cannot bound epsilon={epsilon}"
            f" (need at least {math.ceil(1.0 / epsilon) - 1})"
        )
    return float(scores[k - 1])


@dataclass
class IntervalExplanation:
    """Per-feature points with conformal bounds at one significance level."""

    point: np.ndarray  # (F,)
    lo: np.ndarray  # (F,)
    hi: np.ndarray  # (F,)
    epsilon: float
    sigma: np.ndarray  # (F,) difficulty used (broadcast for shared kinds)
    feature_names: list = None

    def to_json(self):
        return {
            "epsilon": self.epsilon,
            "features": [
                {
                    "name": self.feature_names[f] if self.feature_names else f"f{f}",
                    "point": float(self.point[f]),
                    "lo": float(self.lo[f]),
                    "hi": float(self.hi[f]),
                    "sigma": float(self.sigma[f]),
                }
                for f in range(len(self.point))
            ],
        }


@dataclass
class ConformalExplainer:
    """Fitted surrogate + difficulty estimator + per-feature thresholds."""

    surrogate: object  # PerFeatureSurrogate or MlpSurrogate
    blackbox: TreeEnsemble
    estimator: DifficultyEstimator
    thresholds: dict  # epsilon -> (F,) ndarray
    n_calib: int
    feature_names: list = field(default_factory=list)

    @property
    def epsilons(self):
        return sorted(self.thresholds)

    def threshold_for(self, epsilon):
        if epsilon not in self.thresholds:
            raise NotCalibrated(
                f"epsilon={epsilon} was not calibrated (have {self.epsilons})"
            )
        return self.thresholds[epsilon]


def calibrate_explainer(
    surrogate,
    estimator: DifficultyEstimator,
    calib: Dataset,
    truth: ExplanationMatrix,
    blackbox: TreeEnsemble,
    epsilons,
) -> ConformalExplainer:
    """Per-feature thresholds from the calibration split's normalized residuals."""
    if truth.values.shape[0] != calib.n_rows:
        raise DimensionMismatch("calibration truth rows must match the calibration set")
    pred, _ = surrogate.predict(calib.features, blackbox)
    sig = estimator.sigma(calib.features)
    if sig.ndim == 1:
        sig = sig[:, None]
    alphas = nonconformity(truth.values, pred.values, sig)
    n_feat = alphas.shape[1]
    thresholds = {}
    for eps in epsilons:
        thresholds[float(eps)] = np.array(
            [calibrate_threshold(alphas[:, f], eps) for f in range(n_feat)]
        )
    return ConformalExplainer(
        surrogate=surrogate,
        blackbox=blackbox,
        estimator=estimator,
        thresholds=thresholds,
        n_calib=calib.n_rows,
        feature_names=list(truth.feature_names),
    )


def predict_intervals(ce: ConformalExplainer, X, epsilon):
    """Batch intervals: (points, lo, hi, sigmas), each of shape (n, F)."""
    alpha = ce.threshold_for(epsilon)
    X = np.asarray(X, dtype=np.float64)
    pred, _ = ce.surrogate.predict(X, ce.blackbox)
    points = pred.values
    sig = ce.estimator.sigma(X)
    if sig.ndim == 1:
        sig = np.broadcast_to(sig[:, None], points.shape)
    half = alpha[None, :] * sig
    return points, points - half, points + half, sig


def predict_interval(ce: ConformalExplainer, x, epsilon) -> IntervalExplanation:
    """Interval explanation of one instance at one significance level."""
    points, lo, hi, sig = predict_intervals(ce, np.atleast_2d(x), epsilon)
    return IntervalExplanation(
        point=points[0],
        lo=lo[0],
        hi=hi[0],
        epsilon=float(epsilon),
        sigma=np.asarray(sig[0]),
        feature_names=list(ce.feature_names) or None,
    )


def estimator_to_json(est: DifficultyEstimator, knn_train_ref=None, knn_truth_ref=None, blackbox_ref=None):
    """Serialized estimator; kNN matrices and the black box are file references."""
    obj = {
        "kind": est.kind,
        "k": est.k,
        "gamma": est.gamma,
        "rho": est.rho,
        "form": est.form,
        "beta": est.beta,
        "n_explained": est.n_explained,
    }
    if est.gaussians is not None:
        g = est.gaussians
        obj["gaussians"] = {
            "classes": g.classes.tolist(),
            "means": g.means.tolist(),
            "chol": [c.tolist() for c in g.chol],
            "ridges": g.ridges.tolist(),
        }
    if est.train_X is not None:
        obj["knn"] = {
            "train_ref": knn_train_ref,
            "truth_ref": knn_truth_ref if est.train_labels is not None else None,
            "d_median": est.d_median,
            "label_medians": None
            if est.label_medians is None
            else est.label_medians.tolist(),
        }
    if est.blackbox is not None:
        obj["blackbox_ref"] = blackbox_ref
    return obj


def estimator_from_json(obj, train_X=None, truth_values=None, blackbox=None) -> DifficultyEstimator:
    est = DifficultyEstimator(
        kind=obj["kind"],
        k=obj["k"],
        gamma=obj["gamma"],
        rho=obj["rho"],
        form=obj["form"],
        beta=obj["beta"],
    )
    est.n_explained = obj.get("n_explained")
    if "gaussians" in obj:
        g = obj["gaussians"]
        est.gaussians = ClassGaussians(
            classes=np.asarray(g["classes"]),
            means=np.asarray(g["means"], dtype=np.float64),
            chol=[np.asarray(c, dtype=np.float64) for c in g["chol"]],
            ridges=np.asarray(g["ridges"], dtype=np.float64),
        )
    if "knn" in obj:
        if train_X is None:
            raise ValueError("kNN estimator needs the referenced training matrix")
        est.train_X = np.asarray(train_X, dtype=np.float64)
        est.d_median = obj["knn"]["d_median"]
        if obj["knn"]["label_medians"] is not None:
            if truth_values is None:
                raise ValueError("label-std estimator needs the referenced truth matrix")
            est.label_medians = np.asarray(obj["knn"]["label_medians"], dtype=np.float64)
            est.train_labels = np.asarray(truth_values, dtype=np.float64)
    if obj.get("blackbox_ref") is not None:
        if blackbox is None:
            raise ValueError("pred-conf estimator needs the referenced black box")
        est.blackbox = blackbox
    return est
