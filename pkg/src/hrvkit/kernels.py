"""Backend selection for the hot kernels.

The compiled Cython module is used when it is importable; setting
``HRV_PURE_PYTHON=1`` forces the numpy fallback. Inputs are coerced to
C-contiguous float64 here so both backends see identical buffers.

The compiled loops win on the many small per-cell calls of a build, where
numpy's call overhead dominates. Above ``BLAS_CROSSOVER`` multiply-adds a
BLAS matmul plus vectorized exp is faster on one core, so large cells go
to the numpy path even when the compiled module is present.
"""

import os

import numpy as np

from . import _reference

_compiled = None
if os.environ.get("HRV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _reference
BLAS_CROSSOVER = 1 << 16


def _pick(Q, K):
    if Q.shape[0] * Q.shape[1] * K.shape[0] > BLAS_CROSSOVER:
        return _reference
    return _impl


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def fused_select(Q, K, bounds, scale):
    """Concept index chosen for one head: argmax of segment-mean, spatial-mean softmax mass."""
    Q, K = _c(Q), _c(K)
    return _pick(Q, K).fused_select(Q, K, np.ascontiguousarray(bounds, dtype=np.int64), float(scale))


def logit_abs_mean(Q, K, scale):
    """Mean absolute pre-softmax logit."""
    Q, K = _c(Q), _c(K)
    return _pick(Q, K).logit_abs_mean(Q, K, float(scale))


def backends():
    """All importable backends by name (for benchmarks and agreement tests)."""
    out = {"python": _reference}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from . import _kernels
            out["cython"] = _kernels
        except ImportError:
            pass
    return out
