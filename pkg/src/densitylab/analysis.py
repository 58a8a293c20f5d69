"""Analysis tables relating per-query densities to externally measured metrics.

Performance metrics (perplexities, accuracies) are never computed here; they
arrive as a CSV keyed by ``query_id`` and are joined against KDE results.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .embed import EmbeddingMatrix, cosine_sim
from .kde import KdeResult, KernelSpec, kernel_values, read_results_csv
from .knn import batch_query


class DuplicateKeyError(ValueError):
    def __init__(self, source: str, query_id: int):
        super().__init__(f"duplicate query_id {query_id} in {source}")
        self.query_id = query_id


@dataclass
class MetricRow:
    query_id: int
    metrics: dict[str, float]
    length_chars: int


@dataclass(frozen=True)
class Bin:
    index: int
    count: int
    mean_x: float
    mean_y: float


@dataclass(frozen=True)
class LeakLabelRow:
    query_id: int
    exact: int
    paraphrase_count: int

    @property
    def leaked(self) -> bool:
        return self.exact == 1 or self.paraphrase_count > 0


def effective_epochs(x_t, planted: Sequence, epochs: float) -> float:
    """Training exposure of a query: ``epochs * sum(cos(x_t, p) for p in planted)``."""
    if not epochs > 0:
        raise ValueError("epochs must be positive")
    return epochs * math.fsum(cosine_sim(x_t, p) for p in planted)


def equal_mass_bins(
    points: Sequence[tuple[float, float]],
    n_bins: int,
    keys: Sequence[int] | None = None,
) -> list[Bin]:
    """Sort points by x (ties by ``keys``, default input order) into near-equal bins.

    With ``N = q * n_bins + r`` the first ``r`` bins hold ``q + 1`` points.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if len(points) < n_bins:
        raise ValueError(f"{len(points)} points cannot fill {n_bins} bins")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tie = np.arange(len(pts)) if keys is None else np.asarray(keys)
    order = np.lexsort((tie, pts[:, 0]))
    pts = pts[order]
    q, r = divmod(len(pts), n_bins)
    bins = []
    start = 0
    for i in range(n_bins):
        size = q + 1 if i < r else q
        chunk = pts[start : start + size]
        bins.append(Bin(i, size, math.fsum(chunk[:, 0]) / size, math.fsum(chunk[:, 1]) / size))
        start += size
    return bins


@dataclass
class FilterReport:
    kept: int = 0
    dropped_length: int = 0
    dropped_metric: dict[str, int] = field(default_factory=dict)


def filter_rows(
    rows: Iterable[MetricRow],
    length_range: tuple[int, int] | None = None,
    ppl_caps: Mapping[str, float] | None = None,
) -> tuple[list[MetricRow], FilterReport]:
    """Keep rows inside the length window whose capped metrics are at or below the cap.

    Each dropped row is counted under the first reason that applies (length,
    then caps in mapping order). A row lacking a capped metric is not dropped
    for it.
    """
    caps = dict(ppl_caps or {})
    if length_range is not None and length_range[0] > length_range[1]:
        raise ValueError("length_range lower bound exceeds upper bound")
    report = FilterReport(dropped_metric={name: 0 for name in caps})
    kept = []
    for row in rows:
        if length_range is not None and not length_range[0] <= row.length_chars <= length_range[1]:
            report.dropped_length += 1
            continue
        over = next((m for m, cap in caps.items() if row.metrics.get(m, -math.inf) > cap), None)
        if over is not None:
            report.dropped_metric[over] += 1
            continue
        kept.append(row)
    report.kept = len(kept)
    return kept, report


def correlate(xs: Sequence[float], ys: Sequence[float]) -> dict:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D sequences of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate variance")
    return {
        "pearson": float(stats.pearsonr(x, y)[0]),
        "spearman": float(stats.spearmanr(x, y)[0]),
        "n": int(x.size),
    }


def separability_auc(leaked_scores: Sequence[float], clean_scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(leaked > clean) with ties counted one half."""
    a = np.asarray(leaked_scores, dtype=np.float64)
    b = np.asarray(clean_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be nonempty")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


@dataclass(frozen=True)
class SweepRow:
    bandwidth: float
    auc: float
    mean_gap: float


def bandwidth_sweep(
    corpus: EmbeddingMatrix,
    leaked,
    clean,
    family: str,
    bandwidths: Sequence[float],
    k: int,
) -> list[SweepRow]:
    """Local-component separability of leaked vs clean queries per bandwidth.

    Neighbors are retrieved once; only the kernel is re-evaluated per bandwidth.
    """
    if not len(bandwidths):
        raise ValueError("bandwidth list is empty")
    d_leak = np.array([nl.distances for nl in batch_query(corpus, leaked, k)])
    d_clean = np.array([nl.distances for nl in batch_query(corpus, clean, k)])
    rows = []
    for h in sorted(bandwidths):
        spec = KernelSpec(family, h)
        z_leak = kernel_values(spec, d_leak).mean(axis=1)
        z_clean = kernel_values(spec, d_clean).mean(axis=1)
        rows.append(
            SweepRow(float(h), separability_auc(z_leak, z_clean), float(z_leak.mean() - z_clean.mean()))
        )
    return rows


def knn_majority_label(
    labeled: EmbeddingMatrix, labels: Sequence[str], unlabeled, k: int
) -> list[str]:
    """Modal label among each point's k nearest labeled neighbors.

    Ties go to the label with the smallest summed neighbor distance, then to
    the lexicographically smallest label.
    """
    if labeled.count == 0:
        raise ValueError("labeled set is empty")
    if len(labels) != labeled.count:
        raise ValueError("one label per labeled row is required")
    out = []
    for nl in batch_query(labeled, unlabeled, k):
        votes: Counter = Counter()
        dist: dict[str, float] = {}
        for i, d in zip(nl.neighbor_ids, nl.distances):
            lab = labels[int(i)]
            votes[lab] += 1
            dist[lab] = dist.get(lab, 0.0) + float(d)
        out.append(min(votes, key=lambda lab: (-votes[lab], dist[lab], lab)))
    return out


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    """Metrics CSV: ``query_id,<metric...>,length_chars``."""
    rows = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "query_id" not in reader.fieldnames:
            raise ValueError(f"{path}: missing query_id column")
        names = [c for c in reader.fieldnames if c not in ("query_id", "length_chars")]
        for rec in reader:
            qid = int(rec["query_id"])
            if qid in seen:
                raise DuplicateKeyError(str(path), qid)
            seen.add(qid)
            metrics = {}
            for name in names:
                val = float(rec[name])
                if not math.isfinite(val):
                    raise ValueError(f"{path}: non-finite {name} for query {qid}")
                metrics[name] = val
            length = int(rec["length_chars"]) if rec.get("length_chars") not in (None, "") else 0
            rows.append(MetricRow(qid, metrics, length))
    return rows


@dataclass
class JoinResult:
    rows: list[tuple[KdeResult, MetricRow]]
    unmatched_kde: list[int]
    unmatched_metrics: list[int]

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for _, m in self.rows:
            names.extend(n for n in m.metrics if n not in names)
        return names


def join_rows(kde_rows: Sequence[KdeResult], metric_rows: Sequence[MetricRow]) -> JoinResult:
    by_id: dict[int, KdeResult] = {}
    for r in kde_rows:
        if r.query_id in by_id:
            raise DuplicateKeyError("kde results", r.query_id)
        by_id[r.query_id] = r
    metric_ids = set()
    joined = []
    for m in metric_rows:
        if m.query_id in metric_ids:
            raise DuplicateKeyError("metrics", m.query_id)
        metric_ids.add(m.query_id)
        if m.query_id in by_id:
            joined.append((by_id[m.query_id], m))
    return JoinResult(
        joined,
        sorted(set(by_id) - metric_ids),
        sorted(metric_ids - set(by_id)),
    )


def join_density_metrics(kde_csv: str | Path, metrics_csv: str | Path) -> JoinResult:
    """Inner join of a KDE results CSV and a metrics CSV on ``query_id``."""
    return join_rows(read_results_csv(kde_csv), read_metrics_csv(metrics_csv))


def write_joined_csv(result: JoinResult, path: str | Path) -> None:
    names = result.metric_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["query_id", "z_local", "z_random", "z_combined", *names, "length_chars"])
        for k, m in result.rows:
            w.writerow(
                [k.query_id, repr(k.z_local), repr(k.z_random), repr(k.z_combined)]
                + [repr(m.metrics[n]) if n in m.metrics else "" for n in names]
                + [m.length_chars]
            )


def write_bins_csv(bins: Sequence[Bin], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["index", "count", "mean_x", "mean_y"])
        for b in bins:
            w.writerow([b.index, b.count, repr(b.mean_x), repr(b.mean_y)])


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["bandwidth", "auc", "mean_gap"])
        for r in rows:
            w.writerow([repr(r.bandwidth), repr(r.auc), repr(r.mean_gap)])


def write_labels_csv(query_ids: Sequence[int], labels: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["query_id", "label"])
        w.writerows(zip(query_ids, labels))
