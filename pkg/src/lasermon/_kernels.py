"""Select the compiled tree kernels when available, else the numpy fallback.

Set ``LASERMON_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _tree_py

if os.environ.get("LASERMON_PURE_PYTHON", "") not in ("", "0"):
    _impl = _tree_py
else:
    try:
        from . import _tree_core as _impl
    except ImportError:  # extension not built
        _impl = _tree_py

BACKEND = "cython" if _impl is not _tree_py else "python"

best_split = _impl.best_split
random_split = _impl.random_split
predict_tree = _impl.predict_tree
