"""Exact k-nearest-neighbor search under euclidean distance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import _kernels
from .embed import EmbeddingMatrix

# upper bound on the float64 distance buffer held per block of queries
_BLOCK_BYTES = 1 << 28


@dataclass
class NeighborList:
    query_id: int
    neighbor_ids: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.neighbor_ids)

    def to_json(self) -> str:
        pairs = [[int(i), float(d)] for i, d in zip(self.neighbor_ids, self.distances)]
        return json.dumps({"query_id": int(self.query_id), "neighbors": pairs})

    @classmethod
    def from_json(cls, line: str) -> "NeighborList":
        obj = json.loads(line)
        pairs = obj["neighbors"]
        return cls(
            int(obj["query_id"]),
            np.array([p[0] for p in pairs], dtype=np.int64),
            np.array([p[1] for p in pairs], dtype=np.float64),
        )


def _as_queries(queries) -> np.ndarray:
    if isinstance(queries, EmbeddingMatrix):
        return queries.data
    return np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)


def _check(corpus: EmbeddingMatrix, q: np.ndarray, k: int) -> None:
    if q.shape[1] != corpus.dim:
        raise ValueError(f"dimension mismatch: corpus {corpus.dim}, query {q.shape[1]}")
    if not 1 <= k <= corpus.count:
        raise ValueError(f"k={k} outside [1, {corpus.count}]")


def _top_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ties resolved by ascending index."""
    if k < d2.shape[0]:
        part = np.argpartition(d2, k - 1)[:k]
        cand = np.flatnonzero(d2 <= d2[part].max())
    else:
        cand = np.arange(d2.shape[0])
    order = np.lexsort((cand, d2[cand]))[:k]
    return cand[order]


def iter_batch_query(
    corpus: EmbeddingMatrix, queries, k: int, query_ids: Iterable[int] | None = None
) -> Iterator[NeighborList]:
    q = _as_queries(queries)
    _check(corpus, q, k)
    ids = list(range(q.shape[0])) if query_ids is None else list(query_ids)
    if len(ids) != q.shape[0]:
        raise ValueError("query_ids length does not match the number of queries")
    block = max(1, min(q.shape[0], _BLOCK_BYTES // (8 * corpus.count)))
    buf = np.empty((block, corpus.count), dtype=np.float64)
    for start in range(0, q.shape[0], block):
        qb = q[start : start + block]
        out = buf[: qb.shape[0]]
        _kernels.sq_dist_block(corpus.data, qb, out)
        for r in range(qb.shape[0]):
            nn = _top_k(out[r], k)
            yield NeighborList(ids[start + r], nn.astype(np.int64), np.sqrt(out[r, nn]))


def batch_query(
    corpus: EmbeddingMatrix, queries, k: int, query_ids: Iterable[int] | None = None
) -> list[NeighborList]:
    """Exact top-``k`` neighbors for every row of ``queries``, in query order."""
    return list(iter_batch_query(corpus, queries, k, query_ids))


def query_knn(corpus: EmbeddingMatrix, x_q, k: int, query_id: int = 0) -> NeighborList:
    return batch_query(corpus, np.asarray(x_q)[None, :], k, [query_id])[0]


def recall_at_k(retrieved: NeighborList, relevant_ids, k: int) -> float:
    relevant = set(int(i) for i in relevant_ids)
    if not relevant:
        raise ValueError("relevant set is empty")
    if k > len(retrieved):
        raise ValueError(f"k={k} exceeds the {len(retrieved)} retrieved neighbors")
    hits = relevant.intersection(int(i) for i in retrieved.neighbor_ids[:k])
    return len(hits) / len(relevant)


def write_neighbors(lists: Iterable[NeighborList], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nl in lists:
            fh.write(nl.to_json() + "\n")


def read_neighbors(path: str | Path) -> list[NeighborList]:
    with open(path, encoding="utf-8") as fh:
        return [NeighborList.from_json(line) for line in fh if line.strip()]
