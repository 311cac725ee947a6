"""Evaluation protocol: coverage, normalized interval sizes, top-k feature
selection, execution-time benchmarking, and the Friedman/Nemenyi rank tests
used to compare methods across datasets."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .conformal import ConformalExplainer, predict_intervals
from .errors import DimensionMismatch, KTooLarge, UnsupportedK
from .shapley import ExplanationMatrix, explain_batch

# Critical values q_alpha(k) for the Nemenyi test, k = 2..20: upper-alpha
# quantiles of the range of k iid standard normals divided by sqrt(2)
# (infinite-df studentized range). Recomputed by quadrature in the tests.
NEMENYI_Q = {
    0.05: (
        1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320,
        3.030878, 3.101730, 3.163684, 3.218654, 3.268004, 3.312739,
        3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
        3.543799,
    ),
    0.10: (
        1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732,
        2.779884, 2.854606, 2.919889, 2.977768, 3.029694, 3.076733,
        3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
        3.319233,
    ),
}


def _interval_arrays(intervals):
    """Accept a list of IntervalExplanation or a (lo, hi) array pair."""
    if isinstance(intervals, (tuple, list)) and len(intervals) == 2 and not hasattr(intervals[0], "lo"):
        lo, hi = intervals
        return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    lo = np.stack([iv.lo for iv in intervals])
    hi = np.stack([iv.hi for iv in intervals])
    return lo, hi


def empirical_coverage(intervals, truth: ExplanationMatrix) -> float:
    """Fraction of (instance, feature) cells whose true score lies in the interval."""
    lo, hi = _interval_arrays(intervals)
    values = truth.values if isinstance(truth, ExplanationMatrix) else np.asarray(truth)
    if lo.shape != values.shape:
        raise DimensionMismatch(f"interval shape {lo.shape} vs truth shape {values.shape}")
    covered = (lo <= values) & (values <= hi)
    return float(covered.mean())


def normalized_widths(intervals, truth_for_ranges: ExplanationMatrix):
    """Mean interval width per feature divided by the feature's truth range.

    Features whose ground-truth range is zero cannot be normalized; they are
    excluded from any averaging and reported separately.

    Returns (per_feature, excluded): per_feature has NaN at excluded features.
    """
    lo, hi = _interval_arrays(intervals)
    values = truth_for_ranges.values if isinstance(truth_for_ranges, ExplanationMatrix) else np.asarray(truth_for_ranges)
    widths = (hi - lo).mean(axis=0)
    ranges = values.max(axis=0) - values.min(axis=0)
    excluded = np.flatnonzero(ranges == 0).tolist()
    out = np.full(len(widths), np.nan)
    ok = ranges > 0
    out[ok] = widths[ok] / ranges[ok]
    return out, excluded


def mean_normalized_width(per_feature, feature_subset=None) -> float:
    """Average the normalized widths over a feature subset, skipping excluded."""
    vals = per_feature if feature_subset is None else per_feature[list(feature_subset)]
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if len(vals) else float("nan")


def top_k_features(truth: ExplanationMatrix, k, absolute=True):
    """Indices of the k features with the largest mean (absolute) importance."""
    values = truth.values if isinstance(truth, ExplanationMatrix) else np.asarray(truth)
    if k > values.shape[1]:
        raise KTooLarge(f"k={k} exceeds {values.shape[1]} features")
    means = np.abs(values).mean(axis=0) if absolute else values.mean(axis=0)
    order = sorted(range(len(means)), key=lambda f: (-means[f], f))
    return order[:k]


def _midrank(row):
    order = np.argsort(row, kind="stable")
    ranks = np.empty(len(row))
    i = 0
    while i < len(row):
        j = i
        while j + 1 < len(row) and row[order[j + 1]] == row[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_rows(values, lower_is_better=True):
    """Per-row midranks (1 = best) of a (rows, methods) metric table."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError("need a 2-D table with at least 2 methods")
    signed = values if lower_is_better else -values
    return np.vstack([_midrank(r) for r in signed])


def average_ranks(values, lower_is_better=True):
    """Column-mean midranks of the metric table."""
    return rank_rows(values, lower_is_better).mean(axis=0)


def friedman_statistic(ranks):
    """Friedman chi-square over a (rows, methods) rank table.

    Returns (statistic, degrees of freedom, reject-at-0.05 flag).
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    n_rows, k = ranks.shape
    if n_rows < 2 or k < 2:
        raise ValueError("need at least 2 rows and 2 methods")
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n_rows * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n_rows * (k + 1)
    df = k - 1
    critical = float(chi2.ppf(0.95, df))
    return float(stat), df, bool(stat > critical)


def nemenyi_cd(k, n_rows, alpha=0.05) -> float:
    """Critical difference in average rank: q_alpha(k) * sqrt(k(k+1)/(6N))."""
    if alpha not in NEMENYI_Q:
        raise UnsupportedK(f"alpha={alpha} not tabulated (use 0.05 or 0.10)")
    table = NEMENYI_Q[alpha]
    if not 2 <= k <= len(table) + 1:
        raise UnsupportedK(f"k={k} outside tabulated range 2..{len(table) + 1}")
    return float(table[k - 2] * np.sqrt(k * (k + 1) / (6.0 * n_rows)))


@dataclass
class MethodRunResult:
    method: str
    surrogate_family: str
    estimator_kind: str
    epsilon: float
    elapsed_seconds: float
    coverage: float = None
    per_feature_widths: list = None  # mean raw interval width per feature
    width_all: float = None  # mean normalized width, all normalizable features
    width_top10: float = None
    width_top5: float = None
    excluded_features: list = None

    def to_json(self):
        return {
            "method": self.method,
            "surrogate_family": self.surrogate_family,
            "estimator_kind": self.estimator_kind,
            "epsilon": self.epsilon,
            "coverage": self.coverage,
            "per_feature_widths": self.per_feature_widths,
            "width_all": self.width_all,
            "width_top10": self.width_top10,
            "width_top5": self.width_top5,
            "excluded_features": self.excluded_features,
        }


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def benchmark_methods(
    blackbox,
    explainers: dict,
    test,
    truth: ExplanationMatrix,
    epsilon,
    repeats=3,
):
    """Time and score every calibrated method plus the exact explainer.

    `explainers` maps method ids (e.g. "trees+knn-dist") to calibrated
    ConformalExplainer objects sharing the same splits. Timing covers
    surrogate inference plus difficulty evaluation over the full test set,
    median of `repeats` sequential runs; coverage and widths are computed
    once. The exact explainer is timed on the same rows and carries no
    interval fields (it is the ground truth being approximated).
    """
    X = test.features if hasattr(test, "features") else np.asarray(test)
    results = []
    top10 = top_k_features(truth, min(10, truth.values.shape[1]))
    top5 = top_k_features(truth, min(5, truth.values.shape[1]))

    for method in sorted(explainers):
        ce = explainers[method]
        points, lo, hi, _ = predict_intervals(ce, X, epsilon)
        elapsed = _median_time(lambda: predict_intervals(ce, X, epsilon), repeats)
        per_feature, excluded = normalized_widths((lo, hi), truth)
        family, _, kind = method.partition("+")
        results.append(
            MethodRunResult(
                method=method,
                surrogate_family=family,
                estimator_kind=kind,
                epsilon=float(epsilon),
                elapsed_seconds=elapsed,
                coverage=empirical_coverage((lo, hi), truth),
                per_feature_widths=(hi - lo).mean(axis=0).tolist(),
                width_all=mean_normalized_width(per_feature),
                width_top10=mean_normalized_width(per_feature, top10),
                width_top5=mean_normalized_width(per_feature, top5),
                excluded_features=excluded,
            )
        )

    exact_elapsed = _median_time(lambda: explain_batch(blackbox, X, timer=False), repeats)
    results.append(
        MethodRunResult(
            method="exact",
            surrogate_family="exact",
            estimator_kind=None,
            epsilon=None,
            elapsed_seconds=exact_elapsed,
        )
    )
    return results
