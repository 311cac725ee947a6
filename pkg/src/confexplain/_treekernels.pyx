# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels: batch traversal and path-dependent Shapley.

Same API as _treekernels_py; rows are processed one at a time in C with
preallocated path buffers.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def tree_leaf_index(feature, threshold, left, right, X):
    cdef cnp.int32_t[::1] feat = np.ascontiguousarray(feature, dtype=np.int32)
    cdef cnp.float64_t[::1] thr = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef cnp.int32_t[::1] lft = np.ascontiguousarray(left, dtype=np.int32)
    cdef cnp.int32_t[::1] rgt = np.ascontiguousarray(right, dtype=np.int32)
    cdef cnp.float64_t[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0]
    out_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i
    cdef int node
    with nogil:
        for i in range(n):
            node = 0
            while feat[node] >= 0:
                if x[i, feat[node]] <= thr[node]:
                    node = lft[node]
                else:
                    node = rgt[node]
            out[i] = node
    return out_arr


def ensemble_margin_sum(feature, threshold, left, right, value, starts, class_of, n_groups, X):
    cdef cnp.int32_t[::1] feat = np.ascontiguousarray(feature, dtype=np.int32)
    cdef cnp.float64_t[::1] thr = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef cnp.int32_t[::1] lft = np.ascontiguousarray(left, dtype=np.int32)
    cdef cnp.int32_t[::1] rgt = np.ascontiguousarray(right, dtype=np.int32)
    cdef cnp.float64_t[::1] val = np.ascontiguousarray(value, dtype=np.float64)
    cdef cnp.int64_t[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef cnp.int32_t[::1] cls = np.ascontiguousarray(class_of, dtype=np.int32)
    cdef cnp.float64_t[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_trees = st.shape[0] - 1
    out_arr = np.zeros((n, n_groups), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, t
    cdef cnp.int64_t base
    cdef int node, grp
    with nogil:
        for t in range(n_trees):
            base = st[t]
            grp = cls[t]
            for i in range(n):
                node = 0
                while feat[base + node] >= 0:
                    if x[i, feat[base + node]] <= thr[base + node]:
                        node = lft[base + node]
                    else:
                        node = rgt[base + node]
                out[i, grp] += val[base + node]
    return out_arr


cdef void _extend(cnp.int32_t* fidx, double* zf, double* of, double* pw,
                  int unique_depth, double pz, double po, int pf) noexcept nogil:
    cdef int i
    fidx[unique_depth] = pf
    zf[unique_depth] = pz
    of[unique_depth] = po
    pw[unique_depth] = 1.0 if unique_depth == 0 else 0.0
    for i in range(unique_depth - 1, -1, -1):
        pw[i + 1] += po * pw[i] * (i + 1.0) / (unique_depth + 1.0)
        pw[i] = pz * pw[i] * (unique_depth - i) / (unique_depth + 1.0)


cdef void _unwind(cnp.int32_t* fidx, double* zf, double* of, double* pw,
                  int unique_depth, int path_index) noexcept nogil:
    cdef double of_i = of[path_index]
    cdef double zf_i = zf[path_index]
    cdef double next_one = pw[unique_depth]
    cdef double tmp
    cdef int i
    for i in range(unique_depth - 1, -1, -1):
        if of_i != 0.0:
            tmp = pw[i]
            pw[i] = next_one * (unique_depth + 1.0) / ((i + 1.0) * of_i)
            next_one = tmp - pw[i] * zf_i * (unique_depth - i) / (unique_depth + 1.0)
        else:
            pw[i] = pw[i] * (unique_depth + 1.0) / (zf_i * (unique_depth - i))
    for i in range(path_index, unique_depth):
        fidx[i] = fidx[i + 1]
        zf[i] = zf[i + 1]
        of[i] = of[i + 1]


cdef double _unwound_sum(cnp.int32_t* fidx, double* zf, double* of, double* pw,
                         int unique_depth, int path_index) noexcept nogil:
    cdef double of_i = of[path_index]
    cdef double zf_i = zf[path_index]
    cdef double next_one = pw[unique_depth]
    cdef double total = 0.0
    cdef double tmp
    cdef int i
    for i in range(unique_depth - 1, -1, -1):
        if of_i != 0.0:
            tmp = next_one * (unique_depth + 1.0) / ((i + 1.0) * of_i)
            total += tmp
            next_one = pw[i] - tmp * zf_i * (unique_depth - i) / (unique_depth + 1.0)
        else:
            total += pw[i] * (unique_depth + 1.0) / (zf_i * (unique_depth - i))
    return total


cdef void _shap_recurse(const cnp.int32_t* feat, const cnp.float64_t* thr,
                        const cnp.int32_t* lft, const cnp.int32_t* rgt,
                        const cnp.float64_t* val, const cnp.float64_t* cov,
                        const cnp.float64_t* xrow, cnp.float64_t* phi,
                        double scale, int node, int unique_depth,
                        cnp.int32_t* p_fidx, double* p_zf, double* p_of, double* p_pw,
                        double pz, double po, int pf) noexcept nogil:
    cdef cnp.int32_t* fidx = p_fidx + unique_depth + 1
    cdef double* zf = p_zf + unique_depth + 1
    cdef double* of = p_of + unique_depth + 1
    cdef double* pw = p_pw + unique_depth + 1
    cdef int i, f, hot, cold, path_index
    cdef double w, iz, io, ratio_hot, ratio_cold

    for i in range(unique_depth + 1):
        fidx[i] = p_fidx[i]
        zf[i] = p_zf[i]
        of[i] = p_of[i]
        pw[i] = p_pw[i]
    _extend(fidx, zf, of, pw, unique_depth, pz, po, pf)

    f = feat[node]
    if f < 0:
        for i in range(1, unique_depth + 1):
            w = _unwound_sum(fidx, zf, of, pw, unique_depth, i)
            phi[fidx[i]] += w * (of[i] - zf[i]) * val[node] * scale
        return

    if xrow[f] <= thr[node]:
        hot = lft[node]
        cold = rgt[node]
    else:
        hot = rgt[node]
        cold = lft[node]
    ratio_hot = cov[hot] / cov[node]
    ratio_cold = cov[cold] / cov[node]

    iz = 1.0
    io = 1.0
    path_index = 0
    while path_index <= unique_depth:
        if fidx[path_index] == f:
            break
        path_index += 1
    if path_index != unique_depth + 1:
        iz = zf[path_index]
        io = of[path_index]
        _unwind(fidx, zf, of, pw, unique_depth, path_index)
        unique_depth -= 1

    _shap_recurse(feat, thr, lft, rgt, val, cov, xrow, phi, scale,
                  hot, unique_depth + 1, fidx, zf, of, pw,
                  ratio_hot * iz, io, f)
    _shap_recurse(feat, thr, lft, rgt, val, cov, xrow, phi, scale,
                  cold, unique_depth + 1, fidx, zf, of, pw,
                  ratio_cold * iz, 0.0, f)


def tree_shap_groups(feature, threshold, left, right, value, cover, starts, class_of, n_groups, X, scale):
    cdef cnp.int32_t[::1] feat = np.ascontiguousarray(feature, dtype=np.int32)
    cdef cnp.float64_t[::1] thr = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef cnp.int32_t[::1] lft = np.ascontiguousarray(left, dtype=np.int32)
    cdef cnp.int32_t[::1] rgt = np.ascontiguousarray(right, dtype=np.int32)
    cdef cnp.float64_t[::1] val = np.ascontiguousarray(value, dtype=np.float64)
    cdef cnp.float64_t[::1] cov = np.ascontiguousarray(cover, dtype=np.float64)
    cdef cnp.int64_t[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef cnp.int32_t[::1] cls = np.ascontiguousarray(class_of, dtype=np.int32)
    cdef cnp.float64_t[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double sc = scale
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_feat = x.shape[1]
    cdef Py_ssize_t n_trees = st.shape[0] - 1
    cdef int groups = n_groups

    # path depth bound: longest root-to-leaf node count over all trees
    cdef int max_nodes = 0
    cdef Py_ssize_t t
    for t in range(n_trees):
        max_nodes = max(max_nodes, _tree_depth(feat, lft, rgt, <int>st[t], 0) + 1)
    cdef int cap = max_nodes + 2
    cdef Py_ssize_t buf_len = (<Py_ssize_t>cap * (cap + 1)) // 2 + cap

    phi_arr = np.zeros((n, n_groups, n_feat), dtype=np.float64)
    cdef cnp.float64_t[:, :, ::1] phi = phi_arr
    fidx_arr = np.zeros(buf_len, dtype=np.int32)
    zf_arr = np.zeros(buf_len, dtype=np.float64)
    of_arr = np.zeros(buf_len, dtype=np.float64)
    pw_arr = np.zeros(buf_len, dtype=np.float64)
    cdef cnp.int32_t[::1] fidx = fidx_arr
    cdef cnp.float64_t[::1] zf = zf_arr
    cdef cnp.float64_t[::1] of = of_arr
    cdef cnp.float64_t[::1] pw = pw_arr

    cdef Py_ssize_t i
    cdef cnp.int64_t base
    cdef int grp
    with nogil:
        for t in range(n_trees):
            base = st[t]
            grp = cls[t]
            for i in range(n):
                _shap_recurse(&feat[base], &thr[base], &lft[base], &rgt[base],
                              &val[base], &cov[base], &x[i, 0], &phi[i, grp, 0],
                              sc, 0, 0,
                              &fidx[0], &zf[0], &of[0], &pw[0],
                              1.0, 1.0, -1)
    return phi_arr


cdef int _tree_depth(cnp.int32_t[::1] feat, cnp.int32_t[::1] lft, cnp.int32_t[::1] rgt,
                     int base, int node):
    if feat[base + node] < 0:
        return 0
    cdef int dl = _tree_depth(feat, lft, rgt, base, lft[base + node])
    cdef int dr = _tree_depth(feat, lft, rgt, base, rgt[base + node])
    return 1 + (dl if dl > dr else dr)
