"""Gradient-boosted regression trees: the black-box classifier and the
regressor reused by the per-feature surrogates.

Second-order (Newton) boosting with exact greedy splits over sorted unique
values, L2-regularized leaf values -G/(H+lambda), and raw row counts as
node covers (the explainer weights conditional expectations by them).
No subsampling, so fitting is deterministic; the seed argument is part of
the contract but unused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from . import kernels
from .data import Dataset
from .errors import DimensionMismatch

LOGISTIC = "logistic"
SOFTMAX = "multiclass-softmax"
SQUARED = "squared-error"

_MIN_GAIN = 1e-12
_PROB_CLIP = 1e-12


@dataclass(frozen=True)
class GBTParams:
    learning_rate: float = 0.1
    n_estimators: int = 600
    max_depth: int = 3
    l2_reg: float = 0.01
    min_child_cover: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        if self.min_child_cover < 1:
            raise ValueError("min_child_cover must be >= 1")


# Grid-search candidates for the tuned dimensions of the black box.
DEFAULT_GRID = tuple(
    GBTParams(learning_rate=lr, n_estimators=n, max_depth=d, l2_reg=reg)
    for lr in (0.05, 0.1)
    for n in (100, 300, 600)
    for reg in (0.01, 0.1)
    for d in (3, 5)
)


@dataclass
class Tree:
    """Flat-array binary tree; feature < 0 marks a leaf."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, leaf values (0 at internal nodes)
    cover: np.ndarray  # float64, training rows routed through each node

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self):
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)


@dataclass
class TreeEnsemble:
    objective: str
    base_score: float
    learning_rate: float
    n_classes: int  # 2 for logistic, C for softmax, 0 for regression
    n_features: int
    trees: list = field(default_factory=list)
    tree_class: np.ndarray = None  # int32 margin-group index per tree
    training_loss: list = field(default_factory=list)

    def __post_init__(self):
        if self.tree_class is None:
            self.tree_class = np.zeros(len(self.trees), dtype=np.int32)
        self._packed = None

    @property
    def n_groups(self):
        return self.n_classes if self.objective == SOFTMAX else 1

    def packed(self):
        """Concatenated node arrays for the kernels, cached."""
        if self._packed is None:
            if self.trees:
                sizes = [t.n_nodes for t in self.trees]
                starts = np.zeros(len(sizes) + 1, dtype=np.int64)
                np.cumsum(sizes, out=starts[1:])
                self._packed = {
                    "feature": np.concatenate([t.feature for t in self.trees]),
                    "threshold": np.concatenate([t.threshold for t in self.trees]),
                    "left": np.concatenate([t.left for t in self.trees]),
                    "right": np.concatenate([t.right for t in self.trees]),
                    "value": np.concatenate([t.value for t in self.trees]),
                    "cover": np.concatenate([t.cover for t in self.trees]),
                    "starts": starts,
                    "class_of": np.asarray(self.tree_class, dtype=np.int32),
                }
            else:
                self._packed = {
                    "feature": np.zeros(0, dtype=np.int32),
                    "threshold": np.zeros(0),
                    "left": np.zeros(0, dtype=np.int32),
                    "right": np.zeros(0, dtype=np.int32),
                    "value": np.zeros(0),
                    "cover": np.zeros(0),
                    "starts": np.zeros(1, dtype=np.int64),
                    "class_of": np.zeros(0, dtype=np.int32),
                }
        return self._packed


def _as_matrix(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionMismatch(
            f"expected {n_features} feature columns, got shape {X.shape}"
        )
    return X, single


def predict_margin(ens: TreeEnsemble, X):
    """Raw margin: base_score + learning_rate * sum of routed leaf values."""
    X, single = _as_matrix(X, ens.n_features)
    p = ens.packed()
    raw = kernels.ensemble_margin_sum(
        p["feature"], p["threshold"], p["left"], p["right"], p["value"],
        p["starts"], p["class_of"], ens.n_groups, X,
    )
    margins = ens.base_score + ens.learning_rate * raw
    if ens.n_groups == 1:
        margins = margins[:, 0]
    return margins[0] if single else margins


def predict_proba(ens: TreeEnsemble, X):
    """Sigmoid of the margin (binary) or softmax over class margins."""
    if ens.objective == SQUARED:
        raise ValueError("predict_proba requires a classification objective")
    margins = predict_margin(ens, X)
    if ens.objective == LOGISTIC:
        return expit(margins)
    return softmax(margins, axis=-1)


def predict_class(ens: TreeEnsemble, X):
    proba = predict_proba(ens, X)
    if ens.objective == LOGISTIC:
        return (np.asarray(proba) >= 0.5).astype(np.int64)
    return np.argmax(proba, axis=-1)


def _log_loss(proba, labels, n_classes):
    proba = np.clip(proba, _PROB_CLIP, 1 - _PROB_CLIP)
    if proba.ndim == 1:
        p_true = np.where(labels == 1, proba, 1 - proba)
    else:
        p_true = proba[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(p_true)))


class _TreeBuilder:
    """Grows one depth-limited tree level by level with exact greedy splits.

    All candidate splits of a level are scored in a handful of vectorized
    passes per feature: rows are taken in presorted feature order, grouped
    by node with a stable sort, and prefix sums give every boundary gain.
    """

    def __init__(self, X, orders, params: GBTParams):
        self.X = X
        self.orders = orders
        self.params = params

    def build(self, g, h):
        X, params = self.X, self.params
        n, n_feat = X.shape
        lam = params.l2_reg

        feature = [np.int32(-1)]
        threshold = [0.0]
        left = [np.int32(-1)]
        right = [np.int32(-1)]
        value = [0.0]
        cover = [float(n)]

        node_of = np.zeros(n, dtype=np.int64)
        open_row = np.ones(n, dtype=bool)
        frontier = np.array([0], dtype=np.int64)

        for depth in range(params.max_depth + 1):
            n_nodes = len(feature)
            g_sum = np.bincount(node_of[open_row], weights=g[open_row], minlength=n_nodes)
            h_sum = np.bincount(node_of[open_row], weights=h[open_row], minlength=n_nodes)

            if depth == params.max_depth or not open_row.any():
                for nid in frontier:
                    value[nid] = _leaf_value(g_sum[nid], h_sum[nid], lam)
                break

            rank = np.full(n_nodes, -1, dtype=np.int64)
            rank[frontier] = np.arange(len(frontier))
            best_gain = np.full(len(frontier), -np.inf)
            best_feat = np.full(len(frontier), -1, dtype=np.int64)
            best_thr = np.zeros(len(frontier))

            for j in range(n_feat):
                idx = self.orders[:, j]
                idx = idx[open_row[idx]]
                nid = node_of[idx]
                perm = np.argsort(nid, kind="stable")
                rows_s = idx[perm]
                nid_s = nid[perm]
                gain, thr_cand, grp_nid = self._scan_feature(
                    rows_s, nid_s, j, g, h, g_sum, h_sum, lam
                )
                if gain is None:
                    continue
                loc = rank[grp_nid]
                better = gain > best_gain[loc]
                sel = loc[better]
                best_gain[sel] = gain[better]
                best_feat[sel] = j
                best_thr[sel] = thr_cand[better]

            splitting = best_gain > _MIN_GAIN
            if not splitting.any():
                for nid in frontier:
                    value[nid] = _leaf_value(g_sum[nid], h_sum[nid], lam)
                break

            node_feat_arr = np.full(n_nodes, -1, dtype=np.int64)
            node_thr_arr = np.zeros(n_nodes)
            node_left_arr = np.full(n_nodes, -1, dtype=np.int64)
            node_right_arr = np.full(n_nodes, -1, dtype=np.int64)
            new_frontier = []
            for k, nid in enumerate(frontier):
                if not splitting[k]:
                    value[nid] = _leaf_value(g_sum[nid], h_sum[nid], lam)
                    continue
                lid, rid = len(feature), len(feature) + 1
                feature[nid] = np.int32(best_feat[k])
                threshold[nid] = float(best_thr[k])
                left[nid] = np.int32(lid)
                right[nid] = np.int32(rid)
                for _ in range(2):
                    feature.append(np.int32(-1))
                    threshold.append(0.0)
                    left.append(np.int32(-1))
                    right.append(np.int32(-1))
                    value.append(0.0)
                    cover.append(0.0)
                node_feat_arr[nid] = best_feat[k]
                node_thr_arr[nid] = best_thr[k]
                node_left_arr[nid] = lid
                node_right_arr[nid] = rid
                new_frontier.extend((lid, rid))

            rows_open = np.flatnonzero(open_row)
            nid_open = node_of[rows_open]
            is_split = node_feat_arr[nid_open] >= 0
            stay = rows_open[~is_split]
            open_row[stay] = False
            move = rows_open[is_split]
            nid_m = nid_open[is_split]
            go_left = (
                self.X[move, node_feat_arr[nid_m]] <= node_thr_arr[nid_m]
            )
            node_of[move] = np.where(
                go_left, node_left_arr[nid_m], node_right_arr[nid_m]
            )
            counts = np.bincount(node_of[open_row], minlength=len(feature))
            for nid in new_frontier:
                cover[nid] = float(counts[nid])
            frontier = np.asarray(new_frontier, dtype=np.int64)

        tree = Tree(
            feature=np.asarray(feature, dtype=np.int32),
            threshold=np.asarray(threshold, dtype=np.float64),
            left=np.asarray(left, dtype=np.int32),
            right=np.asarray(right, dtype=np.int32),
            value=np.asarray(value, dtype=np.float64),
            cover=np.asarray(cover, dtype=np.float64),
        )
        leaf_of = kernels.tree_leaf_index(
            tree.feature, tree.threshold, tree.left, tree.right, self.X
        )
        return tree, tree.value[leaf_of]

    def _scan_feature(self, rows_s, nid_s, j, g, h, g_sum, h_sum, lam):
        m = len(rows_s)
        if m == 0:
            return None, None, None
        min_cover = self.params.min_child_cover
        xs = self.X[rows_s, j]
        gs = np.cumsum(g[rows_s])
        hs = np.cumsum(h[rows_s])

        change = np.flatnonzero(nid_s[1:] != nid_s[:-1]) + 1
        starts = np.concatenate(([0], change))
        grp_nid = nid_s[starts]
        counts = np.diff(np.concatenate((starts, [m])))
        grp_of = np.repeat(np.arange(len(starts)), counts)

        gs0 = np.concatenate(([0.0], gs))[starts]
        hs0 = np.concatenate(([0.0], hs))[starts]
        gl = gs - gs0[grp_of]
        hl = hs - hs0[grp_of]
        gt = g_sum[grp_nid]
        ht = h_sum[grp_nid]
        gr = gt[grp_of] - gl
        hr = ht[grp_of] - hl

        pos_in_grp = np.arange(m) - starts[grp_of]
        n_left = pos_in_grp + 1
        n_right = counts[grp_of] - n_left
        boundary = np.zeros(m, dtype=bool)
        boundary[:-1] = (nid_s[1:] == nid_s[:-1]) & (xs[1:] != xs[:-1])
        valid = boundary & (n_left >= min_cover) & (n_right >= min_cover)
        if not valid.any():
            return None, None, None

        parent_term = (gt * gt / (ht + lam))[grp_of]
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_term)
        gain = np.where(valid, gain, -np.inf)

        grp_max = np.maximum.reduceat(gain, starts)
        at_max = gain == grp_max[grp_of]
        pos = np.where(at_max & valid, np.arange(m), m)
        arg = np.minimum.reduceat(pos, starts)
        ok = arg < m
        arg_ok = arg[ok]
        thr = 0.5 * (xs[arg_ok] + xs[np.minimum(arg_ok + 1, m - 1)])
        return grp_max[ok], thr, grp_nid[ok]


def _leaf_value(g, h, lam):
    denom = h + lam
    if denom <= 0:
        return 0.0
    return float(-g / denom)


def _presort(X):
    return np.argsort(X, axis=0, kind="stable").astype(np.int64)


def _boost(X, grad_fn, loss_fn, n_groups, base_score, params, objective):
    """Shared boosting loop; grad_fn returns per-group (g, h) given margins."""
    n = X.shape[0]
    orders = _presort(X)
    builder = _TreeBuilder(X, orders, params)
    margins = np.full((n, n_groups), float(base_score))
    trees = []
    tree_class = []
    losses = [loss_fn(margins)]
    for _ in range(params.n_estimators):
        grads = grad_fn(margins)
        for c in range(n_groups):
            g, h = grads[c]
            tree, leaf_pred = builder.build(g, h)
            trees.append(tree)
            tree_class.append(c)
            margins[:, c] += params.learning_rate * leaf_pred
        losses.append(loss_fn(margins))
    ens = TreeEnsemble(
        objective=objective,
        base_score=float(base_score),
        learning_rate=params.learning_rate,
        n_classes={LOGISTIC: 2, SQUARED: 0}.get(objective, n_groups),
        n_features=X.shape[1],
        trees=trees,
        tree_class=np.asarray(tree_class, dtype=np.int32),
        training_loss=losses,
    )
    return ens


def fit_gbt_classifier(train: Dataset, params: GBTParams, seed=0) -> TreeEnsemble:
    """Fit the black-box classifier (logistic for 2 classes, softmax above)."""
    X = train.features
    y = train.labels
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("training data must contain at least 2 classes")
    C = train.n_classes

    if C == 2:
        y01 = y.astype(np.float64)
        prior = float(np.mean(y01))
        base = float(np.log(prior / (1 - prior)))

        def grad_fn(margins):
            p = expit(margins[:, 0])
            return [(p - y01, p * (1 - p))]

        def loss_fn(margins):
            return _log_loss(expit(margins[:, 0]), y, 2)

        return _boost(X, grad_fn, loss_fn, 1, base, params, LOGISTIC)

    onehot = np.zeros((len(y), C))
    onehot[np.arange(len(y)), y] = 1.0

    def grad_fn(margins):
        p = softmax(margins, axis=1)
        return [(p[:, c] - onehot[:, c], p[:, c] * (1 - p[:, c])) for c in range(C)]

    def loss_fn(margins):
        return _log_loss(softmax(margins, axis=1), y, C)

    return _boost(X, grad_fn, loss_fn, C, 0.0, params, SOFTMAX)


def fit_gbt_regressor(X, y, params: GBTParams, seed=0) -> TreeEnsemble:
    """Fit a squared-error regressor (the per-feature surrogate learner)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or len(y) != X.shape[0] or len(y) == 0:
        raise DimensionMismatch(
            f"target length {y.shape} does not match {X.shape[0]} rows"
        )
    base = float(np.mean(y))

    def grad_fn(margins):
        return [(margins[:, 0] - y, np.ones(len(y)))]

    def loss_fn(margins):
        return float(np.mean((y - margins[:, 0]) ** 2))

    return _boost(X, grad_fn, loss_fn, 1, base, params, SQUARED)


def grid_search(train: Dataset, calib: Dataset, grid, seed=0) -> GBTParams:
    """Pick the grid point with the lowest calibration log-loss (ties: grid order)."""
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    best_params = None
    best_loss = np.inf
    for params in grid:
        ens = fit_gbt_classifier(train, params, seed)
        loss = _log_loss(predict_proba(ens, calib.features), calib.labels, train.n_classes)
        if loss < best_loss:
            best_loss = loss
            best_params = params
    return best_params


def ensemble_to_json(ens: TreeEnsemble) -> dict:
    trees = []
    for t, cls in zip(ens.trees, ens.tree_class):
        nodes = []
        for i in range(t.n_nodes):
            if t.feature[i] < 0:
                nodes.append(
                    {
                        "id": i,
                        "kind": "leaf",
                        "value": float(t.value[i]),
                        "cover": float(t.cover[i]),
                    }
                )
            else:
                nodes.append(
                    {
                        "id": i,
                        "kind": "internal",
                        "feature": int(t.feature[i]),
                        "threshold": float(t.threshold[i]),
                        "left": int(t.left[i]),
                        "right": int(t.right[i]),
                        "cover": float(t.cover[i]),
                    }
                )
        trees.append({"class_index": int(cls), "nodes": nodes})
    return {
        "objective": ens.objective,
        "base_score": ens.base_score,
        "learning_rate": ens.learning_rate,
        "n_classes": ens.n_classes,
        "n_features": ens.n_features,
        "trees": trees,
        "training_loss": list(ens.training_loss),
    }


def ensemble_from_json(obj: dict) -> TreeEnsemble:
    trees = []
    tree_class = []
    for tjson in obj["trees"]:
        nodes = sorted(tjson["nodes"], key=lambda nd: nd["id"])
        size = len(nodes)
        tree = Tree(
            feature=np.full(size, -1, dtype=np.int32),
            threshold=np.zeros(size),
            left=np.full(size, -1, dtype=np.int32),
            right=np.full(size, -1, dtype=np.int32),
            value=np.zeros(size),
            cover=np.zeros(size),
        )
        for nd in nodes:
            i = nd["id"]
            tree.cover[i] = nd["cover"]
            if nd["kind"] == "internal":
                tree.feature[i] = nd["feature"]
                tree.threshold[i] = nd["threshold"]
                tree.left[i] = nd["left"]
                tree.right[i] = nd["right"]
            else:
                tree.value[i] = nd["value"]
        trees.append(tree)
        tree_class.append(tjson["class_index"])
    return TreeEnsemble(
        objective=obj["objective"],
        base_score=obj["base_score"],
        learning_rate=obj["learning_rate"],
        n_classes=obj["n_classes"],
        n_features=obj["n_features"],
        trees=trees,
        tree_class=np.asarray(tree_class, dtype=np.int32),
        training_loss=list(obj.get("training_loss", [])),
    )


def save_ensemble(ens: TreeEnsemble, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_json(ens), fh, sort_keys=True, allow_nan=False)


def load_ensemble(path) -> TreeEnsemble:
    with open(path, encoding="utf-8") as fh:
        return ensemble_from_json(json.load(fh))
