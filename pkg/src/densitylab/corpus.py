"""Sliding-window segmentation of documents into whitespace-token windows.

The segments produced here define the sample space the density estimates
range over: every segment becomes one row of the corpus embedding matrix,
and ``segment_id`` doubles as that row index.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator


class DuplicateDocumentError(ValueError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id {doc_id!r}")
        self.doc_id = doc_id


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not isinstance(self.doc_id, str) or not self.doc_id:
            raise ValueError("doc_id must be a non-empty string")
        if not isinstance(self.text, str):
            raise ValueError(f"text of {self.doc_id!r} must be a string")


@dataclass(frozen=True)
class SegmentationConfig:
    """Window geometry in whitespace tokens.

    ``tokenizer`` is ``"whitespace"`` (split on any run of whitespace) or
    ``"space"`` (split on the single space character only, keeping empty
    tokens produced by repeated spaces).
    """

    window_len: int = 50
    stride: int = 40
    emit_trailing: bool = True
    tokenizer: str = "whitespace"

    def __post_init__(self):
        if self.window_len < 1 or self.stride < 1:
            raise ValueError("window_len and stride must be positive")
        if self.stride > self.window_len:
            # a longer stride silently skips tokens between windows
            raise ValueError("stride must not exceed window_len")
        if self.tokenizer not in ("whitespace", "space"):
            raise ValueError(f"unknown tokenizer {self.tokenizer!r}")


@dataclass(frozen=True)
class Segment:
    segment_id: int
    doc_id: str
    token_start: int
    token_end: int
    text: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


@dataclass
class SegmentManifest:
    counts: dict[str, int] = field(default_factory=dict)
    total: int = 0

    def to_dict(self) -> dict:
        return {"total": self.total, "documents": len(self.counts), "counts": self.counts}


def tokenize(text: str, mode: str = "whitespace") -> list[str]:
    if mode == "space":
        return text.split(" ") if text else []
    return text.split()


def window_spans(n_tokens: int, cfg: SegmentationConfig) -> list[tuple[int, int]]:
    """Token spans ``[start, end)`` of the windows emitted for a document."""
    spans: list[tuple[int, int]] = []
    covered = 0
    for start in range(0, n_tokens, cfg.stride):
        end = start + cfg.window_len
        if end > n_tokens:
            if not cfg.emit_trailing:
                break
            end = n_tokens
        if end > covered:
            spans.append((start, end))
            covered = end
        if end == n_tokens:
            break
    return spans


def expected_segment_count(n_tokens: int, cfg: SegmentationConfig) -> int:
    """Closed-form window count when trailing windows are emitted."""
    if n_tokens == 0:
        return 0
    if n_tokens <= cfg.window_len:
        return 1
    return math.ceil((n_tokens - cfg.window_len) / cfg.stride) + 1


def segment_document(
    doc: Document, cfg: SegmentationConfig, first_id: int = 0
) -> list[Segment]:
    tokens = tokenize(doc.text, cfg.tokenizer)
    return [
        Segment(first_id + i, doc.doc_id, a, b, " ".join(tokens[a:b]))
        for i, (a, b) in enumerate(window_spans(len(tokens), cfg))
    ]


def segment_corpus(
    docs: Iterable[Document],
    cfg: SegmentationConfig,
    sink: Callable[[Segment], None],
) -> SegmentManifest:
    """Stream ``docs`` through the segmenter, handing segments to ``sink`` in order.

    Segment ids are dense from 0 in stream order. Raises
    :class:`DuplicateDocumentError` on a repeated ``doc_id``.
    """
    manifest = SegmentManifest()
    next_id = 0
    for doc in docs:
        if doc.doc_id in manifest.counts:
            raise DuplicateDocumentError(doc.doc_id)
        segments = segment_document(doc, cfg, first_id=next_id)
        for seg in segments:
            sink(seg)
        manifest.counts[doc.doc_id] = len(segments)
        next_id += len(segments)
    manifest.total = next_id
    return manifest


def read_documents(path: str | Path) -> Iterator[Document]:
    """Read a JSON-lines file of ``{"id": ..., "text": ...}`` objects."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                yield Document(str(obj["id"]), obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad document record ({exc})") from exc


def read_segments(path: str | Path) -> Iterator[Segment]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Segment(**json.loads(line))
