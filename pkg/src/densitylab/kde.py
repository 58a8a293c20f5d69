"""Kernel density estimates over an embedding corpus.

Three estimators share one kernel definition:

* ``exact_kde``: the plain kernel mean over every corpus row.
* ``random_kde``: the same mean over a uniform sample drawn without
  replacement, an unbiased estimate of the exact value.
* ``decomposed_kde``: the exact contribution of each query's k nearest
  neighbors plus a sampled estimate of everything else, recombined by subset
  size. The random part is drawn hierarchically: one global pre-sample of
  size ``m1`` shared by all queries, then a per-query draw of ``m2`` rows
  from it that excludes the query's neighbors.

There is no dimension-dependent normalizing constant, so values lie in
``[0, 1]``; they are strictly positive except where float64 underflows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .embed import EmbeddingMatrix
from .knn import NeighborList, batch_query

FAMILIES = {"gaussian": _kernels.GAUSSIAN, "exponential": _kernels.EXPONENTIAL}
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    bandwidth: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def code(self) -> int:
        return FAMILIES[self.family]


def kernel_eval(spec: KernelSpec, dist: float) -> float:
    """gaussian: exp(-d^2 / 2h^2); exponential: exp(-d / h)."""
    if dist < 0:
        raise ValueError("distance must be nonnegative")
    h = spec.bandwidth
    if spec.family == "gaussian":
        return math.exp(-dist * dist / (2.0 * h * h))
    return math.exp(-dist / h)


def kernel_values(spec: KernelSpec, dists) -> np.ndarray:
    d = np.asarray(dists, dtype=np.float64)
    h = spec.bandwidth
    if spec.family == "gaussian":
        return np.exp(-(d * d) / (2.0 * h * h))
    return np.exp(-d / h)


def _queries(x) -> np.ndarray:
    if isinstance(x, EmbeddingMatrix):
        return x.data
    return np.ascontiguousarray(np.atleast_2d(x), dtype=np.float32)


def _check_dim(corpus: EmbeddingMatrix, q: np.ndarray) -> None:
    if corpus.count == 0:
        raise ValueError("corpus is empty")
    if q.shape[1] != corpus.dim:
        raise ValueError(f"dimension mismatch: corpus {corpus.dim}, query {q.shape[1]}")


def exact_kde_batch(corpus: EmbeddingMatrix, queries, spec: KernelSpec) -> np.ndarray:
    q = _queries(queries)
    _check_dim(corpus, q)
    sums = _kernels.kernel_sums_full(corpus.data, q, spec.code, float(spec.bandwidth))
    return sums / corpus.count


def exact_kde(corpus: EmbeddingMatrix, x_q, spec: KernelSpec) -> float:
    return float(exact_kde_batch(corpus, np.asarray(x_q)[None, :], spec)[0])


def subset_kde(corpus: EmbeddingMatrix, x_q, spec: KernelSpec, ids) -> float:
    """Exact KDE at ``x_q`` over the corpus rows listed in ``ids``."""
    q = _queries(np.asarray(x_q)[None, :])
    _check_dim(corpus, q)
    idx = np.ascontiguousarray(ids, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty subset")
    s = _kernels.kernel_sums_shared(corpus.data, q, idx, spec.code, float(spec.bandwidth))
    return float(s[0] / idx.size)


def random_kde(
    corpus: EmbeddingMatrix, x_q, spec: KernelSpec, m: int, seed: int
) -> tuple[float, np.ndarray]:
    """KDE over a uniform without-replacement sample of ``m`` corpus rows.

    Returns the estimate and the sorted sample ids.
    """
    n = corpus.count
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    if m == n:
        return exact_kde(corpus, x_q, spec), np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed & MASK64)
    ids = np.sort(rng.choice(n, size=m, replace=False))
    return subset_kde(corpus, x_q, spec, ids), ids


def combine_split(z_a: float, size_a: int, z_b: float, size_b: int) -> float:
    """Size-weighted mean of the KDEs of two disjoint subsets."""
    if size_a < 0 or size_b < 0:
        raise ValueError("subset sizes must be nonnegative")
    if size_a + size_b == 0:
        raise ValueError("both subsets are empty")
    return (size_a * z_a + size_b * z_b) / (size_a + size_b)


def avg_knn_distance(neighbors: NeighborList) -> float:
    if len(neighbors) == 0:
        raise ValueError("empty neighbor list")
    return float(np.mean(np.asarray(neighbors.distances, dtype=np.float64)))


@dataclass(frozen=True)
class KdeResult:
    query_id: int
    z_local: float
    z_random: float
    z_combined: float
    k: int
    m1: int
    m2: int
    n: int
    kernel: str
    bandwidth: float
    seed: int

    @property
    def local_only(self) -> bool:
        """True when no random complement was drawn (``m2 == 0``)."""
        return self.m2 == 0

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.bandwidth)


CSV_COLUMNS = [f.name for f in fields(KdeResult)]


def combine_components(z_local: float, z_random: float, k: int, n: int) -> float:
    return (k / n) * z_local + ((n - k) / n) * z_random


def decomposed_kde(
    corpus: EmbeddingMatrix,
    queries,
    spec: KernelSpec,
    k: int,
    m1: int,
    m2: int,
    seed: int,
    query_ids: Sequence[int] | None = None,
    neighbors: Sequence[NeighborList] | None = None,
) -> list[KdeResult]:
    """Neighbor-decomposed KDE with hierarchical random sampling.

    ``neighbors`` may carry precomputed exact neighbor lists (one per query,
    same order); otherwise they are retrieved here. The per-query sample is
    seeded with ``seed ^ query_id`` so results do not depend on batching.
    """
    q = _queries(queries)
    _check_dim(corpus, q)
    n = corpus.count
    if k < 1 or k >= n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={n}")
    if not 0 <= m2 <= m1 <= n:
        raise ValueError(f"need 0 <= m2 <= m1 <= n, got m2={m2}, m1={m1}, n={n}")
    if k + m2 > n:
        raise ValueError(f"k + m2 = {k + m2} exceeds corpus size {n}")
    ids = list(range(q.shape[0])) if query_ids is None else [int(i) for i in query_ids]
    if len(ids) != q.shape[0]:
        raise ValueError("query_ids length does not match the number of queries")
    if neighbors is None:
        neighbors = batch_query(corpus, q, k, ids)
    elif len(neighbors) != len(ids):
        raise ValueError("one neighbor list per query is required")

    global_rng = np.random.default_rng(seed & MASK64)
    x1 = np.sort(global_rng.choice(n, size=m1, replace=False))

    samples = np.empty((len(ids), m2), dtype=np.int64)
    z_local = np.empty(len(ids))
    for r, (qid, nl) in enumerate(zip(ids, neighbors)):
        if nl.query_id != qid or len(nl) < k:
            raise ValueError(f"neighbor list for query {qid} does not match (k={k})")
        nn_ids = np.asarray(nl.neighbor_ids[:k], dtype=np.int64)
        z_local[r] = float(np.sum(kernel_values(spec, nl.distances[:k]))) / k
        if m2 == 0:
            continue
        pool = np.setdiff1d(x1, nn_ids, assume_unique=True)
        if pool.size < m2:
            raise ValueError(
                f"query {qid}: only {pool.size} pre-sampled rows remain after removing "
                f"its neighbors, fewer than m2={m2}"
            )
        rng = np.random.default_rng((seed ^ qid) & MASK64)
        samples[r] = np.sort(rng.choice(pool, size=m2, replace=False))

    if m2:
        z_random = _kernels.kernel_sums_rows(
            corpus.data, q, samples, spec.code, float(spec.bandwidth)
        ) / m2
    else:
        z_random = np.zeros(len(ids))

    return [
        KdeResult(
            query_id=qid,
            z_local=float(z_local[r]),
            z_random=float(z_random[r]),
            z_combined=combine_components(float(z_local[r]), float(z_random[r]), k, n),
            k=k,
            m1=m1,
            m2=m2,
            n=n,
            kernel=spec.family,
            bandwidth=float(spec.bandwidth),
            seed=int(seed),
        )
        for r, qid in enumerate(ids)
    ]


def write_results_csv(results: Iterable[KdeResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for res in results:
            w.writerow([_fmt(getattr(res, c)) for c in CSV_COLUMNS])


def write_results_jsonl(results: Iterable[KdeResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(asdict(res)) + "\n")


def read_results_csv(path: str | Path) -> list[KdeResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                KdeResult(
                    query_id=int(row["query_id"]),
                    z_local=float(row["z_local"]),
                    z_random=float(row["z_random"]),
                    z_combined=float(row["z_combined"]),
                    k=int(row["k"]),
                    m1=int(row["m1"]),
                    m2=int(row["m2"]),
                    n=int(row["n"]),
                    kernel=row["kernel"],
                    bandwidth=float(row["bandwidth"]),
                    seed=int(row["seed"]),
                )
            )
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)
