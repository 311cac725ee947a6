"""confexplain: conformal prediction intervals around surrogate-approximated
feature-importance explanations of gradient-boosted tree classifiers."""

__version__ = "0.1.0"

from .boosting import (
    DEFAULT_GRID,
    GBTParams,
    Tree,
    TreeEnsemble,
    fit_gbt_classifier,
    fit_gbt_regressor,
    grid_search,
    load_ensemble,
    predict_margin,
    predict_proba,
    save_ensemble,
)
from .data import (
    Dataset,
    OneHotEncoder,
    RawDataset,
    Schema,
    SplitSpec,
    load_csv,
    load_dataset,
    make_synthetic,
    one_hot_encode,
    save_dataset,
    split,
    split_indices,
)
from .conformal import (
    ConformalExplainer,
    DifficultyEstimator,
    IntervalExplanation,
    calibrate_explainer,
    calibrate_threshold,
    difficulty,
    fit_class_gaussians,
    fit_difficulty_estimator,
    knn_distance,
    mahalanobis,
    nonconformity,
    predict_interval,
    predict_intervals,
)
from .evaluation import (
    MethodRunResult,
    average_ranks,
    benchmark_methods,
    empirical_coverage,
    friedman_statistic,
    nemenyi_cd,
    normalized_widths,
    top_k_features,
)
from .kernels import BACKEND
from .shapley import (
    ExplanationMatrix,
    ImportanceVector,
    brute_force_shapley,
    conditional_expectation,
    expected_value,
    explain_batch,
    load_explanations,
    save_explanations,
    tree_shap,
)
from .surrogate_mlp import MLPConfig, MLPModel, MlpSurrogate, fit_mlp, fit_mlp_surrogate, mlp_predict
from .surrogate_trees import PerFeatureSurrogate, augment, fit_per_feature_surrogate
