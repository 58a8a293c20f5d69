"""Pipeline command line: segment -> embed -> index -> kde -> analyze, plus synth.

Each stage writes into ``<out-dir>/<stage>/`` and leaves a ``manifest.json``
with input and artifact checksums. Failures print one JSON line on stderr and
exit with a stage-independent code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np
from filelock import FileLock, Timeout
from pydantic import ValidationError

from . import _kernels, analysis, corpus, embed, kde, knn, synthlab
from .config import RunConfig, load_config, resolve, scale_params

log = logging.getLogger("densitylab")

EXIT_CODES = {
    "internal": 1,
    "missing_input": 3,
    "schema": 4,
    "parameter": 5,
    "locked": 6,
    "service": 7,
}


class StageError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind

    @property
    def code(self) -> int:
        return EXIT_CODES[self.kind]


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Working context for one stage run: config, paths, and the manifest."""

    def __init__(self, name: str, cfg: RunConfig, base: Path, out_root: Path):
        self.name = name
        self.cfg = cfg
        self.base = base
        self.root = out_root
        self.dir = out_root / name
        self.inputs: dict[str, str] = {}
        self.artifacts: list[Path] = []
        self.parameters: dict[str, Any] = {}

    def input(self, configured: str | None, default: Path | None, what: str, required=True) -> Path | None:
        p = resolve(self.base, configured) if configured else default
        if p is None or not p.exists():
            if not required:
                return None
            raise StageError("missing_input", f"{what} not found: {p}")
        self.inputs[str(p)] = sha256(p)
        return p

    def out(self, name: str) -> Path:
        p = self.dir / name
        self.artifacts.append(p)
        return p

    def write_manifest(self) -> None:
        manifest = {
            "stage": self.name,
            "seed": self.cfg.seed,
            "parameters": self.parameters,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": {
                str(p.relative_to(self.dir)): sha256(p) for p in sorted(set(self.artifacts))
            },
        }
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_matrix(path: Path, what: str) -> embed.EmbeddingMatrix:
    try:
        return embed.read_matrix(path)
    except embed.MatrixFormatError as exc:
        raise StageError("schema", f"{what}: {exc}") from exc


def _query_ids(m: embed.EmbeddingMatrix) -> list[int]:
    return [int(i) for i in m.row_ids()]


def _write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_segment(st: Stage) -> None:
    cfg = st.cfg
    src = st.input(cfg.paths.documents, None, "documents file")
    try:
        seg_cfg = corpus.SegmentationConfig(**cfg.segmentation.model_dump())
    except ValueError as exc:
        raise StageError("parameter", str(exc)) from exc
    st.parameters = {"segmentation": cfg.segmentation.model_dump()}
    with open(st.out("segments.jsonl"), "w", encoding="utf-8") as fh:
        try:
            manifest = corpus.segment_corpus(
                corpus.read_documents(src), seg_cfg, lambda s: fh.write(s.to_json() + "\n")
            )
        except corpus.DuplicateDocumentError as exc:
            raise StageError("schema", str(exc)) from exc
        except ValueError as exc:
            raise StageError("schema", str(exc)) from exc
    _write_json(st.out("segment_manifest.json"), manifest.to_dict())
    log.info("segmented %d documents into %d segments", len(manifest.counts), manifest.total)


def _read_queries(path: Path) -> tuple[list[int], list[str]]:
    ids, texts = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                qid = obj["query_id"] if "query_id" in obj else obj["id"]
                if isinstance(qid, bool) or not isinstance(qid, int) or qid < 0:
                    raise TypeError("query id must be a nonnegative integer")
                ids.append(qid)
                texts.append(obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StageError("schema", f"{path}:{lineno}: bad query record ({exc})") from exc
    if len(set(ids)) != len(ids):
        raise StageError("schema", f"{path}: duplicate query ids")
    return ids, texts


def _embedder_spec(cfg: RunConfig) -> embed.EmbedderSpec:
    e = cfg.embedder.model_dump()
    env = os.environ.get(embed.ENDPOINT_ENV)
    if env and e["kind"] == "external-service":
        e["endpoint"] = env
    try:
        return embed.EmbedderSpec(**e)
    except ValueError as exc:
        raise StageError("parameter", str(exc)) from exc


def cmd_embed(st: Stage) -> None:
    cfg = st.cfg
    spec = _embedder_spec(cfg)
    seg_path = st.input(cfg.paths.segments, st.root / "segment" / "segments.jsonl", "segments file")
    st.parameters = {"embedder": {k: v for k, v in cfg.embedder.model_dump().items() if k != "endpoint"}}
    try:
        segs = list(corpus.read_segments(seg_path))
    except (json.JSONDecodeError, TypeError) as exc:
        raise StageError("schema", f"{seg_path}: {exc}") from exc
    ids = [s.segment_id for s in segs]
    if ids != list(range(len(ids))):
        raise StageError("schema", f"{seg_path}: segment ids are not dense from 0")
    try:
        m = embed.embed_batch([s.text for s in segs], spec)
        embed.write_matrix(embed.EmbeddingMatrix(m.data, ids), st.out("corpus.vec"))
        q_path = st.input(cfg.paths.queries, None, "queries file", required=False)
        if q_path is not None:
            qids, texts = _read_queries(q_path)
            qm = embed.embed_batch(texts, spec)
            embed.write_matrix(embed.EmbeddingMatrix(qm.data, qids), st.out("queries.vec"))
    except embed.EmbeddingServiceError as exc:
        raise StageError("service", str(exc)) from exc


def _corpus_and_queries(st: Stage) -> tuple[embed.EmbeddingMatrix, embed.EmbeddingMatrix]:
    cfg = st.cfg
    c_path = st.input(cfg.paths.corpus_embeddings, st.root / "embed" / "corpus.vec", "corpus embeddings")
    q_path = st.input(cfg.paths.query_embeddings, st.root / "embed" / "queries.vec", "query embeddings")
    c = _load_matrix(c_path, "corpus embeddings")
    q = _load_matrix(q_path, "query embeddings")
    if c.dim != q.dim:
        raise StageError("parameter", f"corpus dim {c.dim} != query dim {q.dim}")
    return c, q


def _params(cfg: RunConfig, n: int) -> tuple[int, int, int]:
    k, m1, m2 = scale_params(n, cfg.k, cfg.m1, cfg.m2, cfg.auto_scale)
    if not 1 <= k < n:
        raise StageError("parameter", f"k={k} must satisfy 1 <= k < corpus size {n}")
    if not 0 <= m2 <= m1 <= n or k + m2 > n:
        raise StageError("parameter", f"need m2 <= m1 <= n and k + m2 <= n (k={k}, m1={m1}, m2={m2}, n={n})")
    return k, m1, m2


def cmd_index(st: Stage) -> None:
    c, q = _corpus_and_queries(st)
    k, _, _ = _params(st.cfg, c.count)
    st.parameters = {"k": k}
    knn.write_neighbors(
        knn.iter_batch_query(c, q, k, _query_ids(q)), st.out("neighbors.jsonl")
    )


def cmd_kde(st: Stage) -> None:
    cfg = st.cfg
    c, q = _corpus_and_queries(st)
    k, m1, m2 = _params(cfg, c.count)
    spec = kde.KernelSpec(cfg.kernel.family, cfg.kernel.bandwidth)
    st.parameters = {"k": k, "m1": m1, "m2": m2, "kernel": cfg.kernel.model_dump(), "exact": cfg.exact}
    nb_path = st.input(cfg.paths.neighbors, st.root / "index" / "neighbors.jsonl", "neighbors file")
    try:
        neighbors = knn.read_neighbors(nb_path)
    except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
        raise StageError("schema", f"{nb_path}: {exc}") from exc
    qids = _query_ids(q)
    if [nl.query_id for nl in neighbors] != qids:
        raise StageError("schema", f"{nb_path}: neighbor lists do not match the query matrix")
    if any(len(nl) < k for nl in neighbors):
        raise StageError("parameter", f"{nb_path}: fewer than k={k} neighbors stored")
    trimmed = [knn.NeighborList(nl.query_id, nl.neighbor_ids[:k], nl.distances[:k]) for nl in neighbors]
    results = kde.decomposed_kde(c, q, spec, k, m1, m2, cfg.seed, qids, trimmed)
    kde.write_results_csv(results, st.out("kde.csv"))
    kde.write_results_jsonl(results, st.out("kde.jsonl"))
    if cfg.exact:
        z = kde.exact_kde_batch(c, q, spec)
        with open(st.out("exact.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["query_id", "z_exact"])
            w.writerows((qid, repr(float(v))) for qid, v in zip(qids, z))


def _read_leak_labels(path: Path) -> dict[int, bool]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out[int(rec["query_id"])] = rec["leaked"].strip().lower() in ("1", "true")
    return out


def cmd_analyze(st: Stage) -> None:
    cfg = st.cfg
    opts = cfg.analysis
    st.parameters = {"analysis": opts.model_dump(), "kernel": cfg.kernel.model_dump()}
    kde_path = st.input(cfg.paths.kde, st.root / "kde" / "kde.csv", "kde results")
    metrics_path = st.input(cfg.paths.metrics, None, "metrics file")
    try:
        joined = analysis.join_density_metrics(kde_path, metrics_path)
    except (KeyError, ValueError) as exc:
        raise StageError("schema", str(exc)) from exc
    analysis.write_joined_csv(joined, st.out("joined.csv"))

    kept, report = analysis.filter_rows(
        [m for _, m in joined.rows], opts.length_range, opts.ppl_caps
    )
    kde_by_id = {r.query_id: r for r, _ in joined.rows}
    summary: dict[str, Any] = {
        "joined": len(joined.rows),
        "unmatched_kde": joined.unmatched_kde,
        "unmatched_metrics": joined.unmatched_metrics,
        "filter": {
            "kept": report.kept,
            "dropped_length": report.dropped_length,
            "dropped_metric": report.dropped_metric,
        },
        "metrics": {},
    }
    for name in joined.metric_names():
        rows = [m for m in kept if name in m.metrics]
        xs = [getattr(kde_by_id[m.query_id], opts.x_column) for m in rows]
        ys = [m.metrics[name] for m in rows]
        entry: dict[str, Any] = {"n": len(rows)}
        if len(rows) >= opts.bins:
            bins = analysis.equal_mass_bins(list(zip(xs, ys)), opts.bins, [m.query_id for m in rows])
            analysis.write_bins_csv(bins, st.out(f"bins_{name}.csv"))
        try:
            entry["correlation"] = analysis.correlate(xs, ys)
        except ValueError as exc:
            entry["correlation"] = None
            entry["note"] = str(exc)
        summary["metrics"][name] = entry

    leak_path = st.input(cfg.paths.leak_labels, None, "leak labels", required=False)
    if leak_path is not None:
        c, q = _corpus_and_queries(st)
        leaked = _read_leak_labels(leak_path)
        qids = _query_ids(q)
        mask = np.array([leaked.get(i, False) for i in qids])
        if mask.all() or not mask.any():
            raise StageError("parameter", "leak labels must mark both leaked and clean queries")
        rows = analysis.bandwidth_sweep(
            c, q.data[mask], q.data[~mask], cfg.kernel.family, opts.sweep_bandwidths, opts.sweep_k
        )
        analysis.write_sweep_csv(rows, st.out("sweep.csv"))

    lab_path = st.input(cfg.paths.labeled_embeddings, None, "labeled embeddings", required=False)
    if lab_path is not None:
        labels_path = st.input(cfg.paths.labels, None, "labels file")
        with open(labels_path, newline="", encoding="utf-8") as fh:
            labels = [rec["label"] for rec in csv.DictReader(fh)]
        labeled = _load_matrix(lab_path, "labeled embeddings")
        _, q = _corpus_and_queries(st)
        try:
            assigned = analysis.knn_majority_label(labeled, labels, q, opts.label_k)
        except ValueError as exc:
            raise StageError("parameter", str(exc)) from exc
        analysis.write_labels_csv(_query_ids(q), assigned, st.out("labels.csv"))

    _write_json(st.out("summary.json"), summary)


def cmd_synth(st: Stage) -> None:
    raw = dict(st.cfg.synth)
    raw.setdefault("seed", st.cfg.seed)
    try:
        scfg = synthlab.SynthConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise StageError("parameter", str(exc)) from exc
    st.parameters = {"synth": scfg.to_dict()}
    report = synthlab.run_leakage_experiment(scfg)
    st.artifacts.extend(synthlab.write_report(report, st.dir))


STAGES: dict[str, Callable[[Stage], None]] = {
    "segment": cmd_segment,
    "embed": cmd_embed,
    "index": cmd_index,
    "kde": cmd_kde,
    "analyze": cmd_analyze,
    "synth": cmd_synth,
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: bundled defaults)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads for compiled loops")
    common.add_argument("--out-dir", help="run directory (overrides the config)")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set kernel.bandwidth=0.1 (value parsed as JSON)",
    )
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="densitylab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    return parser


def _fail(stage: str, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "stage": stage, "message": message}), file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides: dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            return _fail(args.stage, "parameter", f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = str(Path(args.out_dir).resolve())
    try:
        cfg, base = load_config(args.config, overrides)
    except FileNotFoundError as exc:
        return _fail(args.stage, "missing_input", f"config not found: {exc.filename}")
    except (json.JSONDecodeError, ValidationError, ValueError) as exc:
        return _fail(args.stage, "schema", " ".join(str(exc).split()))

    _kernels.set_threads(args.threads)
    out_root = resolve(base, cfg.out_dir)
    st = Stage(args.stage, cfg, base, out_root)
    st.dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_root / ".lock"), timeout=0)
    try:
        with lock:
            STAGES[args.stage](st)
            st.write_manifest()
    except Timeout:
        return _fail(args.stage, "locked", f"another stage holds {out_root / '.lock'}")
    except StageError as exc:
        return _fail(args.stage, exc.kind, str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        log.debug("unhandled error", exc_info=True)
        return _fail(args.stage, "internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
