"""Backend selection for the inner loops.

The compiled extension is used when it was built; set ``FVGNN_PURE_PYTHON=1``
to force the numpy fallback. Both backends give bit-identical results.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FVGNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def stencil_sum(values, receivers, senders, weights, ghost, n):
    """Return ``out[r] = sum_k w_k (x_{s_k} - x_r)`` over edges with receiver r.

    Edges with ``senders[k] < 0`` use ``ghost[k]`` as the sender value.
    """
    return _impl.stencil_sum(_f64(values), _i64(receivers), _i64(senders),
                             _f64(weights), _f64(ghost), int(n))


def segment_sum(rows, segment_ids, n):
    return _impl.segment_sum(_f64(rows), _i64(segment_ids), int(n))


def use_backend(name):
    """Switch backend at runtime (``"python"`` or ``"cython"``); used by benchmarks and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _pykernels, "python"
    elif name == "cython":
        from . import _ckernels

        _impl, BACKEND = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names
