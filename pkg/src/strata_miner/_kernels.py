"""Compiled coverage kernels over packed 64-bit words."""
import os

import numba
import numpy as np
from numba import njit, prange

# The TBB layer shipped with some distributions is too old and numba warns on
# every first parallel call; calls are issued from one thread, so the portable
# workqueue layer is sufficient.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


@njit(inline="always", cache=True)
def _popcount64(x):
    # LLVM lowers this idiom to a native popcnt where available
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return (x * _H01) >> np.uint64(56)


@njit(parallel=True, cache=True)
def _child_counts(parent_cov, parent_pos, columns, parent_idx, feature_idx,
                  n_out, p_out):
    n_words = columns.shape[1]
    for c in prange(parent_idx.shape[0]):
        cov = parent_cov[parent_idx[c]]
        pos = parent_pos[parent_idx[c]]
        col = columns[feature_idx[c]]
        n = np.uint64(0)
        p = np.uint64(0)
        for w in range(n_words):
            n += _popcount64(cov[w] & col[w])
            p += _popcount64(pos[w] & col[w])
        n_out[c] = n
        p_out[c] = p


def child_counts(parent_cov, parent_pos, columns, parent_idx, feature_idx,
                 workers=None):
    """Subgroup size and positive count of every ``parent AND column`` child.

    Parameters
    ----------
    parent_cov, parent_pos : ndarray of uint64, shape (B, words)
        Packed coverage of each parent rule, and that coverage restricted to
        positive patients.
    columns : ndarray of uint64, shape (F, words)
        Packed feature columns.
    parent_idx, feature_idx : ndarray of int64, shape (C,)
        Candidate ``c`` is parent ``parent_idx[c]`` refined by feature
        ``feature_idx[c]``.
    workers : int, optional
        Thread count for the compiled loop. Results do not depend on it.

    Returns
    -------
    n, p : ndarray of int64, shape (C,)
    """
    n_cand = parent_idx.shape[0]
    n_out = np.zeros(n_cand, dtype=np.int64)
    p_out = np.zeros(n_cand, dtype=np.int64)
    if n_cand == 0:
        return n_out, p_out
    if workers is not None:
        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))
    _child_counts(parent_cov, parent_pos, columns,
                  np.ascontiguousarray(parent_idx, dtype=np.int64),
                  np.ascontiguousarray(feature_idx, dtype=np.int64),
                  n_out, p_out)
    return n_out, p_out
