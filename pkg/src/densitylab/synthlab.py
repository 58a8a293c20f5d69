"""Vector-space leakage experiments on a synthetic clustered corpus.

Test queries are planted into the corpus as exact copies and/or
"paraphrases": vectors built to sit at a chosen cosine similarity from the
query. Each cell of the (exact, paraphrase count) grid is run through the
neighbor search and density estimators, and scored for how well local
density separates leaked from clean queries.

Paraphrases for a query are generated once and sorted by ascending cosine;
a cell with ``c`` paraphrases plants the first ``c``, so cells are nested.

Synthetic performance is ``sigmoid(perf_slope * effective_epochs +
perf_bias + N(0, perf_noise^2))``. It only exercises the binning and
correlation tables and models no real system.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .analysis import LeakLabelRow
from .embed import EmbeddingMatrix, cosine_sim, normalize_rows, write_matrix
from .kde import (
    KdeResult,
    KernelSpec,
    decomposed_kde,
    exact_kde_batch,
    write_results_csv,
)
from .knn import batch_query, recall_at_k


@dataclass
class SynthConfig:
    n_corpus: int = 20_000
    dim: int = 32
    n_clusters: int = 50
    cluster_spread: float = 0.2
    n_queries: int = 1_000
    n_leaked: int = 200
    paraphrase_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    exact_flags: list[int] = field(default_factory=lambda: [0, 1])
    target_cos_range: tuple[float, float] = (0.7, 0.95)
    seed: int = 0
    kernel: str = "gaussian"
    bandwidth: float = 0.1
    k: int = 10
    m1: int = 10_000
    m2: int = 1_000
    sweep_bandwidths: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.5, 1.0])
    epochs: float = 2.0
    perf_slope: float = 1.5
    perf_bias: float = -1.0
    perf_noise: float = 0.5
    n_bins: int = 20
    exact_limit: int = 1_000_000

    def __post_init__(self):
        self.target_cos_range = tuple(self.target_cos_range)
        lo, hi = self.target_cos_range
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if not 0 < lo < hi < 1:
            raise ValueError("target_cos_range must satisfy 0 < lo < hi < 1")
        if not 0 <= self.n_leaked <= self.n_queries:
            raise ValueError("n_leaked must lie in [0, n_queries]")
        if any(c not in (0, 1, 2, 3) for c in self.paraphrase_counts):
            raise ValueError("paraphrase counts must come from {0, 1, 2, 3}")
        if any(e not in (0, 1) for e in self.exact_flags):
            raise ValueError("exact flags must be 0 or 1")
        if self.n_corpus < 1 or self.n_clusters < 1 or self.cluster_spread < 0:
            raise ValueError("n_corpus and n_clusters must be positive, spread nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_cos_range"] = list(self.target_cos_range)
        return d


@dataclass
class PlantedLeak:
    query_id: int
    exact: int
    paraphrase_vectors: np.ndarray
    achieved_cos: list[float]
    planted_ids: list[int]


@dataclass
class LeakPlan:
    leaks: list[PlantedLeak]

    def by_query(self) -> dict[int, PlantedLeak]:
        return {p.query_id: p for p in self.leaks}

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.leaks:
                fh.write(
                    json.dumps(
                        {
                            "query_id": p.query_id,
                            "exact": p.exact,
                            "achieved_cos": p.achieved_cos,
                            "planted_ids": p.planted_ids,
                        }
                    )
                    + "\n"
                )


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & 0xFFFFFFFFFFFFFFFF for k in key]))


def _clustered_points(rng, centroids, n, spread) -> tuple[np.ndarray, np.ndarray]:
    assign = rng.integers(0, centroids.shape[0], size=n)
    noise = rng.standard_normal((n, centroids.shape[1]))
    return normalize_rows(centroids[assign] + spread * noise), assign


def make_synthetic_corpus(cfg: SynthConfig) -> tuple[EmbeddingMatrix, np.ndarray, np.ndarray]:
    """Clustered unit vectors: ``(corpus, cluster assignments, centroids)``."""
    rng = _rng(cfg.seed, 0)
    centroids = normalize_rows(rng.standard_normal((cfg.n_clusters, cfg.dim))).astype(np.float64)
    pts, assign = _clustered_points(rng, centroids, cfg.n_corpus, cfg.cluster_spread)
    return EmbeddingMatrix(pts), assign, centroids


def make_queries(cfg: SynthConfig, centroids: np.ndarray) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Held-out queries drawn from the corpus generating process."""
    pts, assign = _clustered_points(_rng(cfg.seed, 1), centroids, cfg.n_queries, cfg.cluster_spread)
    return EmbeddingMatrix(pts), assign


def perturb_to_cosine(x, rho: float, seed: int) -> np.ndarray:
    """A unit vector at cosine ``rho`` from unit vector ``x``.

    Built as ``rho * x + sqrt(1 - rho^2) * u`` with ``u`` a seeded random unit
    vector orthogonal to ``x``.
    """
    if not -1 < rho < 1:
        raise ValueError("rho must lie strictly inside (-1, 1)")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("x must be a vector of dimension >= 2")
    x = x / np.linalg.norm(x)
    g = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF).standard_normal(x.size)
    for _ in range(2):  # second pass removes residual rounding along x
        g -= np.dot(g, x) * x
    u = g / np.linalg.norm(g)
    return rho * x + math.sqrt(1.0 - rho * rho) * u


def paraphrase_set(query, query_id: int, cfg: SynthConfig) -> tuple[np.ndarray, list[float]]:
    """Three float32 paraphrases of ``query`` in ascending cosine order."""
    rng = _rng(cfg.seed, 2, query_id)
    lo, hi = cfg.target_cos_range
    targets = np.sort(rng.uniform(lo, hi, size=3))
    seeds = rng.integers(0, 2**63, size=3)
    vecs = normalize_rows(
        np.array([perturb_to_cosine(query, t, int(s)) for t, s in zip(targets, seeds)])
    )
    cos = [cosine_sim(query, v) for v in vecs]
    order = np.argsort(cos, kind="stable")
    return vecs[order], [cos[i] for i in order]


def choose_leaked(cfg: SynthConfig) -> np.ndarray:
    return np.sort(_rng(cfg.seed, 3).choice(cfg.n_queries, size=cfg.n_leaked, replace=False))


def plant_leaks(
    corpus: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    leaked_ids,
    exact: int,
    n_paraphrases: int,
    cfg: SynthConfig,
) -> tuple[EmbeddingMatrix, LeakPlan, list[LeakLabelRow]]:
    """Append copies and paraphrases of the leaked queries to ``corpus``.

    Planted rows get ids ``corpus.count, corpus.count + 1, ...`` in leaked
    query order (exact copy first, then paraphrases).
    """
    if exact not in (0, 1) or n_paraphrases not in (0, 1, 2, 3):
        raise ValueError("exact must be 0/1 and n_paraphrases in 0..3")
    leaked_set = {int(i) for i in leaked_ids}
    rows: list[np.ndarray] = []
    leaks = []
    next_id = corpus.count
    for qid in sorted(leaked_set):
        q = queries.data[qid]
        planted: list[np.ndarray] = []
        if exact:
            planted.append(q.copy())
        vecs, cos = paraphrase_set(q, qid, cfg)
        vecs, cos = vecs[:n_paraphrases], cos[:n_paraphrases]
        planted.extend(vecs)
        ids = list(range(next_id, next_id + len(planted)))
        next_id += len(planted)
        rows.extend(planted)
        leaks.append(PlantedLeak(qid, exact, vecs, cos, ids))
    augmented = corpus
    if rows:
        augmented = EmbeddingMatrix(np.vstack([corpus.data, np.asarray(rows, dtype=np.float32)]))
    labels = []
    for qid in range(queries.count):
        if qid in leaked_set:
            labels.append(LeakLabelRow(qid, exact, n_paraphrases))
        else:
            labels.append(LeakLabelRow(qid, 0, 0))
    return augmented, LeakPlan(leaks), labels


def planted_cosines(leak: PlantedLeak) -> list[float]:
    return ([1.0] if leak.exact else []) + list(leak.achieved_cos)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class CellResult:
    exact: int
    paraphrases: int
    corpus: EmbeddingMatrix
    plan: LeakPlan
    labels: list[LeakLabelRow]
    kde: list[KdeResult]
    exact_kde: np.ndarray | None
    sweep: list[analysis.SweepRow]
    effective_epochs: np.ndarray
    performance: np.ndarray
    bins: list[analysis.Bin]
    summary: dict

    @property
    def name(self) -> str:
        return f"exact{self.exact}_paras{self.paraphrases}"


@dataclass
class ExperimentReport:
    config: SynthConfig
    base_corpus: EmbeddingMatrix
    queries: EmbeddingMatrix
    leaked_ids: np.ndarray
    cells: list[CellResult]

    def cell(self, exact: int, paraphrases: int) -> CellResult:
        for c in self.cells:
            if (c.exact, c.paraphrases) == (exact, paraphrases):
                return c
        raise KeyError((exact, paraphrases))

    def summary(self) -> dict:
        return {
            "n_corpus": self.config.n_corpus,
            "n_queries": self.config.n_queries,
            "n_leaked": self.config.n_leaked,
            "kernel": self.config.kernel,
            "bandwidth": self.config.bandwidth,
            "cells": [c.summary for c in self.cells],
        }


def _mean(x) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()) if x.size else None


def run_cell(
    cfg: SynthConfig,
    corpus: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    leaked_ids: np.ndarray,
    exact: int,
    paraphrases: int,
) -> CellResult:
    aug, plan, labels = plant_leaks(corpus, queries, leaked_ids, exact, paraphrases, cfg)
    spec = KernelSpec(cfg.kernel, cfg.bandwidth)
    n = aug.count
    k = min(cfg.k, n - 1)
    m1 = min(cfg.m1, n)
    m2 = min(cfg.m2, m1 - k, n - k)
    neighbors = batch_query(aug, queries, max(k, 10))
    local_nbrs = neighbors
    if k != len(neighbors[0]):
        local_nbrs = [
            type(nl)(nl.query_id, nl.neighbor_ids[:k], nl.distances[:k]) for nl in neighbors
        ]
    kde = decomposed_kde(aug, queries, spec, k, m1, max(m2, 0), cfg.seed, neighbors=local_nbrs)
    exact_vals = exact_kde_batch(aug, queries, spec) if n <= cfg.exact_limit else None

    leak_mask = np.array([lab.leaked for lab in labels])
    if leak_mask.all() or not leak_mask.any():
        # no planted rows: score the chosen leak subset against the rest
        leak_mask = np.zeros(queries.count, dtype=bool)
        leak_mask[leaked_ids] = True
    z_local = np.array([r.z_local for r in kde])
    auc = analysis.separability_auc(z_local[leak_mask], z_local[~leak_mask])
    auc_exact = None
    if exact_vals is not None:
        auc_exact = analysis.separability_auc(exact_vals[leak_mask], exact_vals[~leak_mask])

    sweep = analysis.bandwidth_sweep(
        aug, queries.data[leak_mask], queries.data[~leak_mask], cfg.kernel, cfg.sweep_bandwidths, k
    )

    by_q = plan.by_query()
    ee = np.zeros(queries.count)
    recalls10, recalls4 = [], []
    for qid, leak in by_q.items():
        cosines = planted_cosines(leak)
        ee[qid] = cfg.epochs * math.fsum(cosines)
        if leak.planted_ids:
            recalls10.append(recall_at_k(neighbors[qid], leak.planted_ids, 10))
            recalls4.append(recall_at_k(neighbors[qid], leak.planted_ids, 4))

    noise = _rng(cfg.seed, 4, exact, paraphrases).normal(0.0, cfg.perf_noise, queries.count)
    perf = sigmoid(cfg.perf_slope * ee + cfg.perf_bias + noise)
    n_bins = min(cfg.n_bins, queries.count)
    bins = analysis.equal_mass_bins(list(zip(z_local, perf)), n_bins)

    summary = {
        "exact": exact,
        "paraphrases": paraphrases,
        "corpus_size": n,
        "k": k,
        "m1": m1,
        "m2": m2,
        "auc": auc,
        "auc_exact_kde": auc_exact,
        "mean_z_local_leaked": _mean(z_local[leak_mask]),
        "mean_z_local_clean": _mean(z_local[~leak_mask]),
        "recall_at_10": _mean(recalls10),
        "recall_at_4": _mean(recalls4),
        "sweep": [asdict(r) for r in sweep],
        "trend": {
            "effective_epochs_vs_performance": _safe_corr(ee, perf),
            "z_local_vs_performance": _safe_corr(z_local, perf),
        },
    }
    return CellResult(
        exact, paraphrases, aug, plan, labels, kde, exact_vals, sweep, ee, perf, bins, summary
    )


def _safe_corr(x, y) -> dict | None:
    try:
        return analysis.correlate(x, y)
    except ValueError:
        return None


def run_leakage_experiment(cfg: SynthConfig) -> ExperimentReport:
    corpus, _, centroids = make_synthetic_corpus(cfg)
    queries, _ = make_queries(cfg, centroids)
    leaked = choose_leaked(cfg)
    cells = [
        run_cell(cfg, corpus, queries, leaked, e, p)
        for e, p in itertools.product(cfg.exact_flags, cfg.paraphrase_counts)
    ]
    return ExperimentReport(cfg, corpus, queries, leaked, cells)


def write_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write the report directory; returns the artifact paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def add(p: Path) -> Path:
        written.append(p)
        return p

    with open(add(out / "config.json"), "w", encoding="utf-8") as fh:
        json.dump(report.config.to_dict(), fh, indent=2, sort_keys=True)
    write_matrix(report.base_corpus, add(out / "corpus.vec"))
    write_matrix(report.queries, add(out / "queries.vec"))
    for cell in report.cells:
        d = out / cell.name
        d.mkdir(exist_ok=True)
        write_matrix(cell.corpus, add(d / "corpus.vec"))
        cell.plan.to_jsonl(add(d / "plan.jsonl"))
        write_results_csv(cell.kde, add(d / "kde.csv"))
        with open(add(d / "labels.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("query_id,leaked,exact,paraphrase_count,effective_epochs,performance")
            fh.write("" if cell.exact_kde is None else ",z_exact")
            fh.write("\r\n")
            for lab in cell.labels:
                qid = lab.query_id
                row = [
                    str(qid),
                    str(int(lab.leaked)),
                    str(lab.exact),
                    str(lab.paraphrase_count),
                    repr(float(cell.effective_epochs[qid])),
                    repr(float(cell.performance[qid])),
                ]
                if cell.exact_kde is not None:
                    row.append(repr(float(cell.exact_kde[qid])))
                fh.write(",".join(row) + "\r\n")
        analysis.write_sweep_csv(cell.sweep, add(d / "sweep.csv"))
        analysis.write_bins_csv(cell.bins, add(d / "bins.csv"))
    with open(add(out / "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
    return written
