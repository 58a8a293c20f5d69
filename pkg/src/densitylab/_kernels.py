"""Compiled inner loops for distance and kernel-sum evaluation.

Every loop parallelizes over queries only; the per-query traversal order is
fixed, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

# TBB on this platform is often too old and only produces a warning.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

GAUSSIAN = 0
EXPONENTIAL = 1

_FASTMATH = {"reassoc", "contract"}


def set_threads(n: int | None) -> int:
    """Set the worker thread count (clamped to what numba was started with)."""
    limit = numba.config.NUMBA_NUM_THREADS
    if n is None:
        n = limit
    n = max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


@njit(inline="always", fastmath=_FASTMATH)
def _sq_dist(corpus, j, q):
    acc = 0.0
    for t in range(q.shape[0]):
        diff = np.float64(corpus[j, t]) - q[t]
        acc += diff * diff
    return acc


@njit(inline="always")
def _kernel(d2, family, h):
    if family == GAUSSIAN:
        return np.exp(-d2 / (2.0 * h * h))
    return np.exp(-np.sqrt(d2) / h)


@njit(parallel=True, fastmath=_FASTMATH, cache=True)
def sq_dist_block(corpus, queries, out):
    n = corpus.shape[0]
    for i in prange(queries.shape[0]):
        q = queries[i].astype(np.float64)
        for j in range(n):
            out[i, j] = _sq_dist(corpus, j, q)


@njit(parallel=True, fastmath=_FASTMATH, cache=True)
def kernel_sums_full(corpus, queries, family, h):
    n = corpus.shape[0]
    out = np.empty(queries.shape[0])
    for i in prange(queries.shape[0]):
        q = queries[i].astype(np.float64)
        s = 0.0
        for j in range(n):
            s += _kernel(_sq_dist(corpus, j, q), family, h)
        out[i] = s
    return out


@njit(parallel=True, fastmath=_FASTMATH, cache=True)
def kernel_sums_shared(corpus, queries, idx, family, h):
    out = np.empty(queries.shape[0])
    for i in prange(queries.shape[0]):
        q = queries[i].astype(np.float64)
        s = 0.0
        for r in range(idx.shape[0]):
            s += _kernel(_sq_dist(corpus, idx[r], q), family, h)
        out[i] = s
    return out


@njit(parallel=True, fastmath=_FASTMATH, cache=True)
def kernel_sums_rows(corpus, queries, idx, family, h):
    # idx[i] holds the corpus rows summed for query i
    out = np.empty(queries.shape[0])
    for i in prange(queries.shape[0]):
        q = queries[i].astype(np.float64)
        s = 0.0
        for r in range(idx.shape[1]):
            s += _kernel(_sq_dist(corpus, idx[i, r], q), family, h)
        out[i] = s
    return out
