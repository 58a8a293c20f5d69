import csv
import json

import numpy as np
import pytest
from filelock import FileLock

from densitylab.cli import EXIT_CODES, main
from densitylab.config import scale_params
from densitylab.embed import EmbeddingMatrix, write_matrix
from densitylab.knn import read_neighbors
from oracles import naive_kde


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def last_error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture
def text_project(tmp_path):
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(40)]
    with open(tmp_path / "docs.jsonl", "w") as fh:
        for i in range(30):
            text = " ".join(rng.choice(words, rng.integers(0, 150)))
            fh.write(json.dumps({"id": f"doc{i}", "text": text}) + "\n")
    with open(tmp_path / "queries.jsonl", "w") as fh:
        for i in range(12):
            fh.write(json.dumps({"query_id": 100 + i, "text": " ".join(rng.choice(words, 50))}) + "\n")
    with open(tmp_path / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "query_ppl", "response_ppl", "length_chars"])
        for i in range(12):
            w.writerow([100 + i, rng.uniform(5, 700), rng.uniform(5, 90), rng.integers(200, 400)])
    cfg = {
        "paths": {"documents": "docs.jsonl", "queries": "queries.jsonl", "metrics": "metrics.csv"},
        "k": 8,
        "exact": True,
        "analysis": {"bins": 3, "ppl_caps": {"query_ppl": 500}},
        "embedder": {"dim": 32},
    }
    return tmp_path, write_cfg(tmp_path / "cfg.json", cfg)


def test_text_pipeline(text_project):
    root, cfg = text_project
    for stage in ("segment", "embed", "index", "kde", "analyze"):
        assert main([stage, "--config", cfg]) == 0, stage
    run = root / "run"
    man = json.loads((run / "kde" / "manifest.json").read_text())
    assert set(man["artifacts"]) == {"kde.csv", "kde.jsonl", "exact.csv"}
    assert man["parameters"]["k"] == 8
    nbrs = read_neighbors(run / "index" / "neighbors.jsonl")
    assert [n.query_id for n in nbrs] == list(range(100, 112))
    summary = json.loads((run / "analyze" / "summary.json").read_text())
    assert summary["joined"] == 12
    assert summary["filter"]["kept"] + summary["filter"]["dropped_metric"]["query_ppl"] == 12
    assert (run / "analyze" / "bins_query_ppl.csv").exists()
    seg_manifest = json.loads((run / "segment" / "segment_manifest.json").read_text())
    assert seg_manifest["documents"] == 30


def test_missing_input_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"paths": {"documents": "nope.jsonl"}})
    assert main(["segment", "--config", cfg]) == EXIT_CODES["missing_input"]
    err = last_error(capsys)
    assert err["error"] == "missing_input" and err["stage"] == "segment"


def test_schema_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"k": "many"})
    assert main(["kde", "--config", cfg]) == EXIT_CODES["schema"]
    assert last_error(capsys)["error"] == "schema"
    cfg = write_cfg(tmp_path / "d.json", {"unknown_key": 1})
    assert main(["kde", "--config", cfg]) == EXIT_CODES["schema"]
    (tmp_path / "docs.jsonl").write_text('{"id": "a", "text": "x"}\n{"id": "a", "text": "y"}\n')
    cfg = write_cfg(tmp_path / "e.json", {"paths": {"documents": "docs.jsonl"}})
    assert main(["segment", "--config", cfg]) == EXIT_CODES["schema"]
    assert "duplicate doc_id 'a'" in last_error(capsys)["message"]


def test_parameter_exit_code(tmp_path, capsys):
    (tmp_path / "docs.jsonl").write_text('{"id": "a", "text": "x"}\n')
    cfg = write_cfg(
        tmp_path / "c.json",
        {"paths": {"documents": "docs.jsonl"}, "segmentation": {"window_len": 10, "stride": 20}},
    )
    assert main(["segment", "--config", cfg]) == EXIT_CODES["parameter"]
    assert last_error(capsys)["error"] == "parameter"


@pytest.fixture
def vector_project(tmp_path):
    rng = np.random.default_rng(7)
    write_matrix(EmbeddingMatrix.from_vectors(rng.standard_normal((1000, 16))), tmp_path / "corpus.vec")
    write_matrix(
        EmbeddingMatrix.from_vectors(rng.standard_normal((25, 16)), ids=range(500, 525)),
        tmp_path / "queries.vec",
    )
    cfg = {
        "paths": {"corpus_embeddings": "corpus.vec", "query_embeddings": "queries.vec"},
        "k": 50,
        "m1": 1000,
        "m2": 950,
        "exact": True,
        "kernel": {"family": "gaussian", "bandwidth": 0.5},
    }
    return tmp_path, write_cfg(tmp_path / "cfg.json", cfg)


def test_kde_stage_matches_exact_oracle(vector_project):
    root, cfg = vector_project
    assert main(["index", "--config", cfg]) == 0
    assert main(["kde", "--config", cfg]) == 0
    with open(root / "run" / "kde" / "kde.csv") as fh:
        combined = {int(r["query_id"]): float(r["z_combined"]) for r in csv.DictReader(fh)}
    with open(root / "run" / "kde" / "exact.csv") as fh:
        exact = {int(r["query_id"]): float(r["z_exact"]) for r in csv.DictReader(fh)}
    from densitylab.embed import read_matrix

    c = read_matrix(root / "corpus.vec").data.tolist()
    q = read_matrix(root / "queries.vec")
    assert sorted(combined) == list(range(500, 525))
    for qid, row in zip(q.ids.tolist(), q.data.tolist()):
        oracle = naive_kde(c, row, "gaussian", 0.5)
        assert abs(combined[qid] - oracle) <= 1e-9 * oracle
        assert abs(exact[qid] - oracle) <= 1e-9 * oracle


def test_flags_override_file(vector_project):
    root, cfg = vector_project
    out = root / "elsewhere"
    assert main(["index", "--config", cfg, "--out-dir", str(out), "--set", "k=5"]) == 0
    assert len(read_neighbors(out / "index" / "neighbors.jsonl")[0]) == 5
    assert main(["kde", "--config", cfg, "--out-dir", str(out), "--set", "k=5", "--seed", "9",
                 "--set", "m2=100", "--set", "kernel.bandwidth=0.25"]) == 0
    man = json.loads((out / "kde" / "manifest.json").read_text())
    assert man["seed"] == 9 and man["parameters"]["m2"] == 100
    assert man["parameters"]["kernel"]["bandwidth"] == 0.25


def test_kde_requires_enough_neighbors(vector_project, capsys):
    root, cfg = vector_project
    assert main(["index", "--config", cfg, "--set", "k=5"]) == 0
    assert main(["kde", "--config", cfg]) == EXIT_CODES["parameter"]


def test_lock_held(vector_project, capsys):
    root, cfg = vector_project
    (root / "run").mkdir()
    with FileLock(str(root / "run" / ".lock")):
        assert main(["index", "--config", cfg]) == EXIT_CODES["locked"]
    assert last_error(capsys)["error"] == "locked"


def test_rerun_identical_checksums(vector_project):
    root, cfg = vector_project
    assert main(["index", "--config", cfg]) == 0
    assert main(["kde", "--config", cfg]) == 0
    first = (root / "run" / "kde" / "manifest.json").read_bytes()
    assert main(["kde", "--config", cfg]) == 0
    assert (root / "run" / "kde" / "manifest.json").read_bytes() == first


def test_scale_params():
    assert scale_params(100, 10, 1_000_000, 10_000) == (10, 50, 40)
    assert scale_params(1000, 50, 1000, 950) == (50, 1000, 950)
    assert scale_params(100, 10, 1_000_000, 10_000, auto_scale=False) == (10, 1_000_000, 10_000)


def test_external_endpoint_env_override(text_project, monkeypatch, capsys):
    root, _ = text_project
    cfg = write_cfg(
        root / "ext.json",
        {"paths": {"documents": "docs.jsonl"}, "embedder": {"kind": "external-service", "dim": 8,
                                                            "endpoint": "http://127.0.0.1:9/none", "max_retries": 0}},
    )
    assert main(["segment", "--config", cfg]) == 0
    monkeypatch.setenv("DENSITYLAB_EMBED_ENDPOINT", "http://127.0.0.1:1/embed")
    assert main(["embed", "--config", cfg]) == EXIT_CODES["service"]
    assert last_error(capsys)["error"] == "service"


def test_analyze_sweep_and_labels(vector_project):
    root, cfg_path = vector_project
    cfg = json.loads(open(cfg_path).read())
    with open(root / "metrics.csv", "w") as fh:
        fh.write("query_id,query_ppl,length_chars\n")
        for i in range(500, 525):
            fh.write(f"{i},{i * 1.5},300\n")
    with open(root / "leaks.csv", "w") as fh:
        fh.write("query_id,leaked\n")
        for i in range(500, 525):
            fh.write(f"{i},{int(i < 505)}\n")
    rng = np.random.default_rng(1)
    write_matrix(EmbeddingMatrix.from_vectors(rng.standard_normal((40, 16))), root / "labeled.vec")
    with open(root / "labels.csv", "w") as fh:
        fh.write("row,label\n")
        for i in range(40):
            fh.write(f"{i},{'ab'[i % 2]}\n")
    cfg["paths"].update(metrics="metrics.csv", leak_labels="leaks.csv",
                        labeled_embeddings="labeled.vec", labels="labels.csv")
    cfg["analysis"] = {"bins": 5}
    cfg_path = write_cfg(root / "cfg2.json", cfg)
    for stage in ("index", "kde", "analyze"):
        assert main([stage, "--config", cfg_path]) == 0
    run = root / "run" / "analyze"
    sweep = (run / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "bandwidth,auc,mean_gap" and len(sweep) == 5
    labels = (run / "labels.csv").read_text().splitlines()
    assert labels[0] == "query_id,label" and len(labels) == 26
    assert len((run / "bins_query_ppl.csv").read_text().splitlines()) == 6
