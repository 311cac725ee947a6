"""Backend selection for the tree kernels.

The compiled extension is preferred when it was built; the NumPy fallback
is used otherwise, or when CONFEXPLAIN_PURE_PYTHON=1 is set. Both expose
the same three functions and agree numerically (see tests and
benchmarks/bench_backends.py).
"""

import os

from . import _treekernels_py

if os.environ.get("CONFEXPLAIN_PURE_PYTHON", "") == "1":
    _impl = _treekernels_py
else:
    try:
        from . import _treekernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _treekernels_py

BACKEND = _impl.BACKEND

tree_leaf_index = _impl.tree_leaf_index
ensemble_margin_sum = _impl.ensemble_margin_sum
tree_shap_groups = _impl.tree_shap_groups
