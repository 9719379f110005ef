"""Pure numpy implementations of the hot loops.

Every function accumulates strictly in array order so results are
bit-identical to the compiled versions in ``_ckernels.pyx``.
"""
import numpy as np


def stencil_sum(values, receivers, senders, weights, ghost, n):
    """Per-receiver sum of ``w_k * (x_sender - x_receiver)``.

    A negative sender index marks a boundary pseudo-edge whose sender value is
    ``ghost[k]``.
    """
    values = np.asarray(values, dtype=np.float64)
    inner = senders >= 0
    send_vals = np.where(inner, values[np.where(inner, senders, 0)], ghost)
    contrib = weights * (send_vals - values[receivers])
    return np.bincount(receivers, weights=contrib, minlength=n)


def segment_sum(rows, segment_ids, n):
    """Scatter-add rows of a 1-D or 2-D array into ``n`` segments."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        return np.bincount(segment_ids, weights=rows, minlength=n)
    out = np.empty((n, rows.shape[1]), dtype=np.float64)
    for j in range(rows.shape[1]):
        out[:, j] = np.bincount(segment_ids, weights=rows[:, j], minlength=n)
    return out
