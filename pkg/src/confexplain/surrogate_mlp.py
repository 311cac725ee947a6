"""Multi-target perceptron surrogate: one network predicting every feature's
importance score jointly.

Plain dense layers with ReLU hidden activations, trained by mini-batch SGD
with momentum on mean squared error, early-stopped on a held-out validation
fraction with best-weight restore. Inputs are standardized by default
(statistics from the non-validation rows only); targets never are.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .boosting import TreeEnsemble
from .errors import DimensionMismatch, NonFiniteLoss
from .shapley import ExplanationMatrix
from .surrogate_trees import PROBABILITY, augment


@dataclass(frozen=True)
class MLPConfig:
    hidden_sizes: tuple = (1024, 1024)
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden_sizes) == 0:
            raise ValueError("hidden_sizes must be non-empty")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("invalid optimizer configuration")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class MLPModel:
    weights: list  # per layer, shape (fan_in, fan_out)
    biases: list  # per layer, shape (fan_out,)
    x_mean: np.ndarray
    x_scale: np.ndarray
    config: MLPConfig
    trace: list = field(default_factory=list)  # per epoch [train_loss, val_loss]

    @property
    def input_width(self):
        return self.weights[0].shape[0]

    @property
    def output_width(self):
        return self.weights[-1].shape[1]

    def forward(self, X):
        h = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def loss_and_gradients(self, X, Y):
        """MSE over all outputs and its analytic gradients (for FD checks too)."""
        X = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale
        Y = np.asarray(Y, dtype=np.float64)
        acts = [X]
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        diff = out - Y
        loss = float(np.mean(diff**2))

        n_terms = diff.size
        delta = 2.0 * diff / n_terms
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        return loss, grads_w, grads_b


def _init_layers(sizes, rng):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def fit_mlp(dev_X_augmented, dev_Y, cfg: MLPConfig) -> MLPModel:
    """Train the multi-target regressor with early stopping."""
    X = np.asarray(dev_X_augmented, dtype=np.float64)
    Y = dev_Y.values if isinstance(dev_Y, ExplanationMatrix) else np.asarray(dev_Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} rows of inputs vs {Y.shape[0]} targets")
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(np.ceil(cfg.val_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation fraction leaves no training rows")

    if cfg.standardize:
        x_mean = X[train_idx].mean(axis=0)
        x_scale = X[train_idx].std(axis=0)
        x_scale[x_scale < 1e-12] = 1.0
    else:
        x_mean = np.zeros(X.shape[1])
        x_scale = np.ones(X.shape[1])

    sizes = [X.shape[1], *cfg.hidden_sizes, Y.shape[1]]
    weights, biases = _init_layers(sizes, rng)
    model = MLPModel(weights=weights, biases=biases, x_mean=x_mean, x_scale=x_scale, config=cfg)

    vel_w = [np.zeros_like(W) for W in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    X_tr, Y_tr = X[train_idx], Y[train_idx]
    X_val, Y_val = X[val_idx], Y[val_idx]

    best_val = np.inf
    best_state = None
    since_best = 0
    for _ in range(cfg.max_epochs):
        batch_order = rng.permutation(len(X_tr))
        for lo in range(0, len(X_tr), cfg.batch_size):
            sel = batch_order[lo : lo + cfg.batch_size]
            loss, gw, gb = model.loss_and_gradients(X_tr[sel], Y_tr[sel])
            if not np.isfinite(loss):
                raise NonFiniteLoss("training loss diverged; lower the learning rate")
            for layer in range(len(weights)):
                vel_w[layer] = cfg.momentum * vel_w[layer] - cfg.learning_rate * gw[layer]
                vel_b[layer] = cfg.momentum * vel_b[layer] - cfg.learning_rate * gb[layer]
                weights[layer] += vel_w[layer]
                biases[layer] += vel_b[layer]

        train_loss = float(np.mean((model.forward(X_tr) - Y_tr) ** 2))
        val_loss = float(np.mean((model.forward(X_val) - Y_val) ** 2))
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NonFiniteLoss("training loss diverged; lower the learning rate")
        model.trace.append([train_loss, val_loss])
        if val_loss < best_val:
            best_val = val_loss
            best_state = ([W.copy() for W in weights], [b.copy() for b in biases])
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break

    if best_state is not None:
        model.weights = best_state[0]
        model.biases = best_state[1]
    return model


def mlp_predict(model: MLPModel, X_augmented, timer=False):
    """Single forward pass per row; deterministic."""
    X = np.asarray(X_augmented, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_width:
        raise DimensionMismatch(
            f"expected {model.input_width} input columns, got shape {X.shape}"
        )
    start = time.perf_counter() if timer else 0.0
    values = model.forward(X)
    elapsed = (time.perf_counter() - start) if timer else 0.0
    matrix = ExplanationMatrix(
        values=values, feature_names=[f"f{j}" for j in range(model.output_width)]
    )
    return matrix, elapsed


@dataclass
class MlpSurrogate:
    """Serving wrapper pairing the network with its augmentation mode."""

    model: MLPModel
    mode: str = PROBABILITY
    feature_names: list = None

    def predict(self, X, bb: TreeEnsemble, timer=False):
        start = time.perf_counter() if timer else 0.0
        X_aug = augment(X, bb, self.mode)
        values = self.model.forward(X_aug)
        elapsed = (time.perf_counter() - start) if timer else 0.0
        names = self.feature_names or [f"f{j}" for j in range(self.model.output_width)]
        return ExplanationMatrix(values=values, feature_names=list(names)), elapsed


def fit_mlp_surrogate(dev_X, dev_Y, bb, cfg: MLPConfig, mode=PROBABILITY) -> MlpSurrogate:
    X_aug = augment(np.asarray(dev_X, dtype=np.float64), bb, mode)
    model = fit_mlp(X_aug, dev_Y, cfg)
    names = dev_Y.feature_names if isinstance(dev_Y, ExplanationMatrix) else None
    return MlpSurrogate(model=model, mode=mode, feature_names=names)


def mlp_to_json(s: MlpSurrogate) -> dict:
    cfg = s.model.config
    return {
        "kind": "mlp",
        "mode": s.mode,
        "feature_names": list(s.feature_names or []),
        "config": {
            "hidden_sizes": list(cfg.hidden_sizes),
            "learning_rate": cfg.learning_rate,
            "momentum": cfg.momentum,
            "batch_size": cfg.batch_size,
            "max_epochs": cfg.max_epochs,
            "patience": cfg.patience,
            "val_fraction": cfg.val_fraction,
            "standardize": cfg.standardize,
            "seed": cfg.seed,
        },
        "weights": [W.tolist() for W in s.model.weights],
        "biases": [b.tolist() for b in s.model.biases],
        "x_mean": s.model.x_mean.tolist(),
        "x_scale": s.model.x_scale.tolist(),
        "trace": s.model.trace,
    }


def mlp_from_json(obj: dict) -> MlpSurrogate:
    cfg_raw = dict(obj["config"])
    cfg_raw["hidden_sizes"] = tuple(cfg_raw["hidden_sizes"])
    cfg = MLPConfig(**cfg_raw)
    model = MLPModel(
        weights=[np.asarray(W, dtype=np.float64) for W in obj["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in obj["biases"]],
        x_mean=np.asarray(obj["x_mean"], dtype=np.float64),
        x_scale=np.asarray(obj["x_scale"], dtype=np.float64),
        config=cfg,
        trace=[list(t) for t in obj.get("trace", [])],
    )
    return MlpSurrogate(model=model, mode=obj["mode"], feature_names=obj.get("feature_names") or None)


def save_mlp(s: MlpSurrogate, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_to_json(s), fh, sort_keys=True, allow_nan=False)


def load_mlp(path) -> MlpSurrogate:
    with open(path, encoding="utf-8") as fh:
        return mlp_from_json(json.load(fh))
