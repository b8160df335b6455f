"""Backend selection for the hot kernels.

The compiled extension is preferred. Set ``GRAMCLUST_PURE_PYTHON=1`` before
import to force the numpy fallback.
"""

import os

from gramclust import _pykernels

if os.environ.get("GRAMCLUST_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from gramclust import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"

sign_rows = _impl.sign_rows
# BLAS matmul beats the hand-written loop (see benchmarks/bench_kernels.py)
batch_gram = _pykernels.batch_gram
assign_nearest = _impl.assign_nearest
cluster_sums = _impl.cluster_sums
hungarian = _impl.hungarian
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3

__all__ = [
    "BACKEND",
    "sign_rows",
    "batch_gram",
    "assign_nearest",
    "cluster_sums",
    "hungarian",
    "im2col3x3",
    "col2im3x3",
]
