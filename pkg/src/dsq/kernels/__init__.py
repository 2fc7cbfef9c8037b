"""Kernel backend selection.

The compiled extension (_ck, Cython) is preferred when importable; the
numpy/pure-Python fallback (pyk) is mathematically identical. Set
DSQ_PURE_PYTHON=1 to force the fallback, e.g. to benchmark against it.
"""

import os

from . import pyk

if os.environ.get("DSQ_PURE_PYTHON", "") == "1":
    _impl = pyk
    BACKEND = "python"
else:
    try:
        from . import _ck as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = pyk
        BACKEND = "python"

levenshtein = _impl.levenshtein
softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
