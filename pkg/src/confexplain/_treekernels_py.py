"""NumPy fallback for the tree kernels.

Mirrors the compiled extension's API. Traversal is vectorized across rows;
the Shapley path recursion is vectorized across the instance batch (the
path structure and cover fractions are per-tree constants, only the
hot/cold indicators vary per instance).
"""

import numpy as np

BACKEND = "numpy"


def tree_leaf_index(feature, threshold, left, right, X):
    """Leaf node id reached by every row of X in a single tree."""
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    while True:
        f = feature[node]
        internal = f >= 0
        if not internal.any():
            return node
        fc = np.where(internal, f, 0)
        go_left = X[rows, fc] <= threshold[node]
        nxt = np.where(go_left, left[node], right[node])
        node = np.where(internal, nxt, node)


def ensemble_margin_sum(feature, threshold, left, right, value, starts, class_of, n_groups, X):
    """Sum of leaf values per output group over all trees (packed arrays)."""
    n = X.shape[0]
    out = np.zeros((n, n_groups))
    for t in range(len(starts) - 1):
        s = starts[t]
        leaf = tree_leaf_index(
            feature[s : starts[t + 1]],
            threshold[s : starts[t + 1]],
            left[s : starts[t + 1]],
            right[s : starts[t + 1]],
            X,
        )
        out[:, class_of[t]] += value[s + leaf]
    return out


def tree_shap_groups(feature, threshold, left, right, value, cover, starts, class_of, n_groups, X, scale):
    """Path-dependent Shapley attributions, summed per output group.

    Returns phi of shape (n_rows, n_groups, n_features); the caller adds
    the base value. `scale` multiplies every tree's contribution.
    """
    n, n_feat = X.shape
    phi = np.zeros((n, n_groups, n_feat))
    for t in range(len(starts) - 1):
        s, e = starts[t], starts[t + 1]
        _shap_one_tree(
            feature[s:e], threshold[s:e], left[s:e], right[s:e],
            value[s:e], cover[s:e], X, phi[:, class_of[t], :], scale,
        )
    return phi


def _shap_one_tree(feature, threshold, left, right, value, cover, X, phi, scale):
    n = X.shape[0]

    def unwound_sum(zf, of, pw, path_index):
        depth = len(pw) - 1
        of_i = of[path_index]
        zf_i = zf[path_index]
        next_one = pw[depth].copy()
        total = np.zeros(n)
        for i in range(depth - 1, -1, -1):
            hot = of_i != 0.0
            tmp = next_one * ((depth + 1) / (i + 1))
            total_hot = total + tmp
            next_hot = pw[i] - tmp * (zf_i * (depth - i) / (depth + 1))
            total_cold = total + pw[i] * ((depth + 1) / (zf_i * (depth - i)))
            total = np.where(hot, total_hot, total_cold)
            next_one = np.where(hot, next_hot, next_one)
        return total

    def unwind(fidx, zf, of, pw, path_index):
        depth = len(pw) - 1
        of_i = of[path_index]
        zf_i = zf[path_index]
        next_one = pw[depth].copy()
        new_pw = [None] * depth
        for i in range(depth - 1, -1, -1):
            hot = of_i != 0.0
            tmp = pw[i]
            pw_hot = next_one * ((depth + 1) / (i + 1))
            next_hot = tmp - pw_hot * (zf_i * (depth - i) / (depth + 1))
            pw_cold = tmp * ((depth + 1) / (zf_i * (depth - i)))
            new_pw[i] = np.where(hot, pw_hot, pw_cold)
            next_one = np.where(hot, next_hot, next_one)
        drop = lambda xs: xs[:path_index] + xs[path_index + 1 :]
        return drop(fidx), drop(zf), drop(of), new_pw

    def recurse(node, fidx, zf, of, pw, pz, po, pf):
        # extend the unique path with the incoming (pz, po, pf) fractions
        depth = len(fidx)
        fidx = fidx + [pf]
        zf = zf + [pz]
        of = of + [po]
        pw = [w.copy() for w in pw]
        pw.append(np.ones(n) if depth == 0 else np.zeros(n))
        for i in range(depth - 1, -1, -1):
            pw[i + 1] += po * pw[i] * ((i + 1) / (depth + 1))
            pw[i] = pz * pw[i] * ((depth - i) / (depth + 1))

        if feature[node] < 0:
            leaf_value = value[node]
            for i in range(1, len(fidx)):
                w = unwound_sum(zf, of, pw, i)
                phi[:, fidx[i]] += w * (of[i] - zf[i]) * (leaf_value * scale)
            return

        f = int(feature[node])
        went_left = (X[:, f] <= threshold[node]).astype(np.float64)
        lo, hi = int(left[node]), int(right[node])
        ratio_l = cover[lo] / cover[node]
        ratio_r = cover[hi] / cover[node]

        iz = 1.0
        io = 1.0
        for pi in range(len(fidx)):
            if fidx[pi] == f:
                iz = zf[pi]
                io = of[pi]
                fidx, zf, of, pw = unwind(fidx, zf, of, pw, pi)
                break

        recurse(lo, fidx, zf, of, pw, ratio_l * iz, io * went_left, f)
        recurse(hi, fidx, zf, of, pw, ratio_r * iz, io * (1.0 - went_left), f)

    recurse(0, [], [], [], [], 1.0, np.ones(n), -1)
