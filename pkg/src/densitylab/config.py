"""Run configuration for the pipeline CLI (one JSON file, flags override)."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

log = logging.getLogger(__name__)


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Model):
    documents: Optional[str] = None
    segments: Optional[str] = None
    queries: Optional[str] = None
    corpus_embeddings: Optional[str] = None
    query_embeddings: Optional[str] = None
    neighbors: Optional[str] = None
    kde: Optional[str] = None
    metrics: Optional[str] = None
    leak_labels: Optional[str] = None
    labeled_embeddings: Optional[str] = None
    labels: Optional[str] = None


class Segmentation(_Model):
    window_len: int = Field(50, ge=1)
    stride: int = Field(40, ge=1)
    emit_trailing: bool = True
    tokenizer: Literal["whitespace", "space"] = "whitespace"


class Embedder(_Model):
    kind: Literal["toy-hash", "external-service"] = "toy-hash"
    dim: int = Field(64, ge=2)
    endpoint: Optional[str] = None
    batch_size: int = Field(256, ge=1)
    seed: int = 0
    max_retries: int = Field(3, ge=0)
    max_in_flight: int = Field(4, ge=1)


class Kernel(_Model):
    family: Literal["gaussian", "exponential"] = "gaussian"
    bandwidth: float = Field(0.5, gt=0)


class Analysis(_Model):
    bins: int = Field(20, ge=1)
    x_column: Literal["z_local", "z_random", "z_combined"] = "z_local"
    length_range: Optional[tuple[int, int]] = None
    ppl_caps: dict[str, float] = Field(default_factory=dict)
    sweep_bandwidths: list[float] = Field(default_factory=lambda: [0.1, 0.2, 0.5, 1.0])
    sweep_k: int = Field(10, ge=1)
    label_k: int = Field(5, ge=1)


class RunConfig(_Model):
    out_dir: str = "run"
    seed: int = 0
    paths: Paths = Field(default_factory=Paths)
    segmentation: Segmentation = Field(default_factory=Segmentation)
    embedder: Embedder = Field(default_factory=Embedder)
    kernel: Kernel = Field(default_factory=Kernel)
    k: int = Field(1_000, ge=1)
    m1: int = Field(1_000_000, ge=0)
    m2: int = Field(10_000, ge=0)
    auto_scale: bool = True
    exact: bool = False
    analysis: Analysis = Field(default_factory=Analysis)
    synth: dict[str, Any] = Field(default_factory=dict)


def default_config_path() -> Path:
    return Path(__file__).with_name("default_config.json")


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ValueError(f"cannot set {key}: {p} is not a section")
    d[parts[-1]] = value


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> tuple[RunConfig, Path]:
    """Load a config file, apply dotted-key overrides, return it with its base dir.

    Relative paths inside the file resolve against the file's directory.
    """
    if path is None:
        raw: dict = json.loads(default_config_path().read_text())
        base = Path.cwd()
    else:
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        base = path.resolve().parent
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    return RunConfig.model_validate(raw), base


def resolve(base: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    q = Path(p)
    return q if q.is_absolute() else base / q


def scale_params(n: int, k: int, m1: int, m2: int, auto_scale: bool = True) -> tuple[int, int, int]:
    """Shrink the random-sample sizes when the corpus cannot supply them.

    Only applies when ``m1 > n``: then ``m1 <- n // 2`` and
    ``m2 <- min(m2, m1 - k)``.
    """
    if auto_scale and m1 > n:
        new_m1 = n // 2
        new_m2 = max(0, min(m2, new_m1 - k))
        log.warning("corpus of %d rows: scaling m1 %d -> %d, m2 %d -> %d", n, m1, new_m1, m2, new_m2)
        m1, m2 = new_m1, new_m2
    return k, m1, m2
