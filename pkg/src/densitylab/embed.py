"""Embedding matrices: construction, normalization, and the on-disk format.

File layout (all integers little-endian)::

    b"LMD3VEC1"                  8-byte magic
    u32 dim, u64 count           header
    count*dim float32            row-major vectors   \
    u8 flag                      1 if an id table follows   } payload
    count u64                    ids (only when flag == 1)  /
    u32 crc32(payload)           trailer
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"LMD3VEC1"
_HEADER = struct.Struct("<8sIQ")
NORM_TOL = 1e-4
ENDPOINT_ENV = "DENSITYLAB_EMBED_ENDPOINT"


class MatrixFormatError(ValueError):
    """Corrupt header, bad magic or checksum mismatch."""


class TruncatedMatrixError(MatrixFormatError):
    pass


class EmbeddingServiceError(RuntimeError):
    def __init__(self, message: str, failed_indices: list[int]):
        super().__init__(f"{message}; failed indices: {failed_indices}")
        self.failed_indices = failed_indices


@dataclass(frozen=True)
class EmbeddingMatrix:
    """``count x dim`` float32 rows with an optional row -> id table."""

    data: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError(f"expected a 2-D matrix, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.ids is not None:
            ids = np.asarray(self.ids, dtype=np.uint64)
            if ids.shape != (data.shape[0],):
                raise ValueError("ids must have one entry per row")
            object.__setattr__(self, "ids", ids)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.count

    def row_ids(self) -> np.ndarray:
        if self.ids is None:
            return np.arange(self.count, dtype=np.uint64)
        return self.ids

    def norm_violations(self, tol: float = NORM_TOL) -> np.ndarray:
        norms = np.sqrt(np.einsum("ij,ij->i", self.data, self.data, dtype=np.float64))
        return np.flatnonzero(np.abs(norms - 1.0) > tol)

    @classmethod
    def from_vectors(cls, vectors, ids=None) -> "EmbeddingMatrix":
        """Normalize ``vectors`` row-wise (zero rows map to ``e_0``)."""
        return cls(normalize_rows(vectors), ids)

    def concat(self, other: "EmbeddingMatrix") -> "EmbeddingMatrix":
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        ids = None
        if self.ids is not None or other.ids is not None:
            ids = np.concatenate([self.row_ids(), other.row_ids() + np.uint64(self.count)])
        return EmbeddingMatrix(np.vstack([self.data, other.data]), ids)


def normalize_rows(vectors) -> np.ndarray:
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    out = np.zeros_like(x)
    ok = norms > 0
    out[ok] = x[ok] / norms[ok, None]
    out[~ok, 0] = 1.0
    return out.astype(np.float32)


def _token_bucket(token: str, dim: int, seed: int) -> tuple[int, float]:
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    h = int.from_bytes(
        hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest(), "little"
    )
    return (h >> 1) % dim, (1.0 if h & 1 else -1.0)


def toy_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic hashed bag-of-tokens embedding, L2-normalized.

    Each whitespace token adds +-1 to one coordinate chosen by a keyed hash.
    Texts whose counts cancel to zero (including the empty text) map to e_0.
    """
    if dim < 2:
        raise ValueError("dim must be at least 2")
    acc = np.zeros(dim, dtype=np.float64)
    for tok in text.split():
        bucket, sign = _token_bucket(tok, dim, seed)
        acc[bucket] += sign
    return normalize_rows(acc)[0]


def cosine_sim(x, y) -> float:
    """Cosine similarity of two (nearly) unit vectors.

    Computed as ``x.y / sqrt(|x|^2 |y|^2)`` in float64, which makes
    ``cosine_sim(x, x) == 1.0`` exactly for any nonzero ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(x, y) / denom, -1.0, 1.0))


def write_matrix(m: EmbeddingMatrix, path: str | Path) -> None:
    bad = m.norm_violations()
    if bad.size:
        raise ValueError(f"{bad.size} rows are not unit norm (first: {int(bad[0])})")
    floats = m.data.astype("<f4", copy=False).tobytes()
    if m.ids is None:
        payload = floats + b"\x00"
    else:
        payload = floats + b"\x01" + m.ids.astype("<u8", copy=False).tobytes()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, m.dim, m.count))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    os.replace(tmp, path)


def read_matrix(path: str | Path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MatrixFormatError(f"{path}: file shorter than header")
    magic, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if dim == 0:
        raise MatrixFormatError(f"{path}: dim is zero")
    nfloat = count * dim * 4
    body = memoryview(raw)[_HEADER.size:]
    if len(body) < nfloat + 1 + 4:
        raise TruncatedMatrixError(
            f"{path}: payload holds {len(body)} bytes, header promises {nfloat} bytes of floats"
        )
    flag = body[nfloat]
    if flag not in (0, 1):
        raise MatrixFormatError(f"{path}: bad id-table flag {flag}")
    plen = nfloat + 1 + (8 * count if flag else 0)
    if len(body) < plen + 4:
        raise TruncatedMatrixError(f"{path}: id table truncated")
    if len(body) > plen + 4:
        raise MatrixFormatError(f"{path}: {len(body) - plen - 4} trailing bytes")
    payload = body[:plen]
    (crc,) = struct.unpack_from("<I", body, plen)
    if zlib.crc32(payload) != crc:
        raise MatrixFormatError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4", count=count * dim).reshape(count, dim)
    ids = None
    if flag:
        ids = np.frombuffer(payload, dtype="<u8", count=count, offset=nfloat + 1)
    m = EmbeddingMatrix(data.astype(np.float32), None if ids is None else ids.copy())
    bad = m.norm_violations(1e-3)
    if bad.size:
        warnings.warn(f"{path}: {bad.size} rows deviate from unit norm by more than 1e-3")
    return m


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "toy-hash"
    dim: int = 64
    endpoint: str | None = None
    batch_size: int = 256
    seed: int = 0
    max_retries: int = 3
    max_in_flight: int = 4
    timeout: float = 60.0

    def __post_init__(self):
        if self.kind not in ("toy-hash", "external-service"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "toy-hash" and self.endpoint:
            raise ValueError("toy-hash embedder takes no endpoint")
        if self.kind == "external-service" and not self.endpoint:
            raise ValueError("external-service embedder requires an endpoint")
        if self.dim < 2 or self.batch_size < 1:
            raise ValueError("dim must be >= 2 and batch_size >= 1")


def embed_batch(texts: Sequence[str], spec: EmbedderSpec) -> EmbeddingMatrix:
    """Embed ``texts`` so that row ``i`` corresponds to ``texts[i]``."""
    if spec.kind == "toy-hash":
        data = np.empty((len(texts), spec.dim), dtype=np.float32)
        for i, t in enumerate(texts):
            data[i] = toy_embed(t, spec.dim, spec.seed)
        return EmbeddingMatrix(data)
    return EmbeddingMatrix(_embed_remote(list(texts), spec))


def _embed_remote(texts: list[str], spec: EmbedderSpec) -> np.ndarray:
    starts = list(range(0, len(texts), spec.batch_size))
    out = np.empty((len(texts), spec.dim), dtype=np.float32)

    def run(client: httpx.Client, start: int) -> tuple[int, np.ndarray | None]:
        chunk = texts[start : start + spec.batch_size]
        for attempt in range(spec.max_retries + 1):
            try:
                resp = client.post(spec.endpoint, json={"texts": chunk})
                resp.raise_for_status()
                vecs = np.asarray(resp.json()["vectors"], dtype=np.float64)
                if vecs.shape != (len(chunk), spec.dim):
                    raise ValueError(f"service returned shape {vecs.shape}")
                return start, vecs
            except (httpx.HTTPError, ValueError, KeyError) as exc:
                log.warning("embed batch at %d failed (attempt %d): %s", start, attempt + 1, exc)
        return start, None

    failed: list[int] = []
    with httpx.Client(timeout=spec.timeout) as client:
        with ThreadPoolExecutor(max_workers=spec.max_in_flight) as pool:
            for start, vecs in pool.map(lambda s: run(client, s), starts):
                stop = min(start + spec.batch_size, len(texts))
                if vecs is None:
                    failed.extend(range(start, stop))
                else:
                    out[start:stop] = normalize_rows(vecs)
    if failed:
        raise EmbeddingServiceError("embedding service failed after retries", failed)
    return out
