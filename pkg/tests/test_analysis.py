import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from densitylab.analysis import (
    DuplicateKeyError,
    LeakLabelRow,
    MetricRow,
    bandwidth_sweep,
    correlate,
    effective_epochs,
    equal_mass_bins,
    filter_rows,
    join_density_metrics,
    knn_majority_label,
    separability_auc,
    write_bins_csv,
)
from densitylab.embed import EmbeddingMatrix
from densitylab.kde import KdeResult, write_results_csv
from densitylab.synthlab import perturb_to_cosine
from conftest import random_unit
from oracles import pairwise_auc


def test_effective_epochs_exact_copy(rng):
    x = random_unit(rng, 1, 16).data[0]
    assert effective_epochs(x, [x.copy()], 2) == 2.0
    assert effective_epochs(x, [], 2) == 0.0


def test_effective_epochs_paraphrases(rng):
    x = random_unit(rng, 1, 16).data[0].astype(np.float64)
    p = [perturb_to_cosine(x, 0.9, 1), perturb_to_cosine(x, 0.8, 2)]
    assert effective_epochs(x, p, 2) == pytest.approx(3.4, abs=1e-12)
    with pytest.raises(ValueError):
        effective_epochs(x, p, 0)


def test_effective_epochs_linear_in_epochs(rng):
    x = random_unit(rng, 1, 8).data[0]
    p = list(random_unit(rng, 4, 8).data)
    assert effective_epochs(x, p, 6.0) == pytest.approx(3 * effective_epochs(x, p, 2.0), rel=1e-12)


def test_bins_divisible_and_remainder():
    pts = [(float(i), 0.0) for i in range(40)]
    assert [b.count for b in equal_mass_bins(pts, 20)] == [2] * 20
    pts = [(float(i), 0.0) for i in range(41)]
    assert [b.count for b in equal_mass_bins(pts, 20)] == [3] + [2] * 19


def test_bins_identity_function(rng):
    xs = rng.uniform(0, 1, 100)
    for b in equal_mass_bins(list(zip(xs, xs)), 10):
        assert abs(b.mean_x - b.mean_y) <= 1e-12


def test_bins_ordering_and_ties():
    pts = [(1.0, 10.0), (0.0, 1.0), (1.0, 20.0), (0.0, 2.0)]
    bins = equal_mass_bins(pts, 4, keys=[3, 0, 1, 2])
    assert [b.mean_y for b in bins] == [1.0, 2.0, 20.0, 10.0]


def test_bins_errors():
    with pytest.raises(ValueError):
        equal_mass_bins([(0, 0)], 0)
    with pytest.raises(ValueError):
        equal_mass_bins([(0, 0)] * 3, 4)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 300), nb=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_bins_properties(n, nb, seed):
    if n < nb:
        return
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 5, size=(n, 2)).astype(float)
    bins = equal_mass_bins(pts.tolist(), nb)
    counts = [b.count for b in bins]
    assert sum(counts) == n and max(counts) - min(counts) <= 1
    assert counts == sorted(counts, reverse=True)
    means = [b.mean_x for b in bins]
    assert means == sorted(means)


def rows(*specs):
    return [MetricRow(i, m, length) for i, (m, length) in enumerate(specs)]


def test_filter_caps_and_length():
    data = rows(
        ({"query_ppl": 501.0}, 300),
        ({"query_ppl": 500.0}, 300),
        ({"query_ppl": 20.0, "response_ppl": 61.0}, 300),
        ({"query_ppl": 20.0}, 200),
    )
    kept, rep = filter_rows(data, (250, 350), {"query_ppl": 500, "response_ppl": 60})
    assert [r.query_id for r in kept] == [1]
    assert rep.dropped_length == 1
    assert rep.dropped_metric == {"query_ppl": 1, "response_ppl": 1}
    assert rep.kept == 1


def test_filter_length_window_keeps_300():
    kept, _ = filter_rows(rows(({}, 300)), (250, 350), {})
    assert len(kept) == 1


def test_filter_empty():
    kept, rep = filter_rows([], (0, 10), {"query_ppl": 1})
    assert kept == [] and rep.dropped_length == 0 and rep.dropped_metric == {"query_ppl": 0}


def test_correlate_exact_cases():
    xs = np.arange(10.0)
    assert correlate(xs, 2 * xs + 1)["pearson"] == pytest.approx(1.0)
    r = correlate(xs, xs[::-1])
    assert r["spearman"] == pytest.approx(-1.0) and r["n"] == 10
    with pytest.raises(ValueError):
        correlate([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        correlate([1, 2], [1, 2])


def test_correlate_null():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        xs = rng.standard_normal(1000)
        hits += abs(correlate(xs, rng.permutation(xs))["pearson"]) < 0.1
    assert hits >= 99


def test_auc_cases():
    assert separability_auc([5, 6], [1, 2]) == 1.0
    assert separability_auc([1, 2, 2], [2, 1, 2]) == 0.5
    assert separability_auc([0.9, 0.8], [0.7, 0.85]) == 0.75
    with pytest.raises(ValueError):
        separability_auc([], [1])


@settings(max_examples=100, deadline=None)
@given(
    a=st.lists(st.integers(0, 6), min_size=1, max_size=25),
    b=st.lists(st.integers(0, 6), min_size=1, max_size=25),
)
def test_auc_matches_pair_enumeration(a, b):
    auc = separability_auc(a, b)
    assert auc == pytest.approx(pairwise_auc(a, b), abs=1e-12)
    assert 0 <= auc <= 1
    assert separability_auc(b, a) == pytest.approx(1 - auc, abs=1e-12)


def test_sweep_single_and_order(rng):
    c = random_unit(rng, 300, 8)
    leaked = c.data[:10]
    clean = random_unit(rng, 10, 8).data
    (row,) = bandwidth_sweep(c, leaked, clean, "gaussian", [0.2], k=5)
    assert row.bandwidth == 0.2 and row.auc == 1.0 and row.mean_gap > 0
    table = bandwidth_sweep(c, leaked, clean, "exponential", [1.0, 0.01, 0.1, 0.05], k=5)
    assert [r.bandwidth for r in table] == [0.01, 0.05, 0.1, 1.0]
    with pytest.raises(ValueError):
        bandwidth_sweep(c, leaked, clean, "gaussian", [], k=5)


def test_knn_label_identity_and_vote():
    e = np.eye(4, dtype=np.float32)
    labeled = EmbeddingMatrix(e)
    assert knn_majority_label(labeled, list("abcd"), e[2:3], 1) == ["c"]
    v = EmbeddingMatrix.from_vectors([[1, 0.1, 0, 0], [1, -0.1, 0, 0], [1, 0, 0.12, 0], [0, 0, 0, 1]])
    assert knn_majority_label(v, ["x", "x", "y", "z"], np.array([[1.0, 0, 0, 0]]), 3) == ["x"]


def test_knn_label_tie_break():
    v = EmbeddingMatrix.from_vectors([[1, 0.1, 0], [1, -0.3, 0]])
    assert knn_majority_label(v, ["b", "a"], np.array([[1.0, 0, 0]]), 2) == ["b"]
    w = EmbeddingMatrix.from_vectors([[1, 0.2, 0], [1, -0.2, 0]])
    assert knn_majority_label(w, ["b", "a"], np.array([[1.0, 0, 0]]), 2) == ["a"]
    with pytest.raises(ValueError):
        knn_majority_label(EmbeddingMatrix(np.zeros((0, 3))), [], np.ones((1, 3)), 1)


def test_knn_label_clusters_and_isometry():
    rng = np.random.default_rng(8)
    centers = random_unit(rng, 2, 16).data.astype(np.float64)
    lab_pts = np.vstack([centers[i] + 0.15 * rng.standard_normal((200, 16)) for i in range(2)])
    labels = ["c0"] * 200 + ["c1"] * 200
    test_pts = np.vstack([centers[i] + 0.05 * rng.standard_normal((100, 16)) for i in range(2)])
    truth = ["c0"] * 100 + ["c1"] * 100
    labeled = EmbeddingMatrix.from_vectors(lab_pts)
    queries = EmbeddingMatrix.from_vectors(test_pts)
    got = knn_majority_label(labeled, labels, queries, 5)
    assert np.mean([g == t for g, t in zip(got, truth)]) >= 0.99
    R = ortho_group.rvs(16, random_state=2)
    got_r = knn_majority_label(
        EmbeddingMatrix.from_vectors(labeled.data @ R.T), labels, queries.data @ R.T, 5
    )
    assert got_r == got


def test_leak_label_row():
    assert LeakLabelRow(0, 1, 0).leaked and LeakLabelRow(0, 0, 2).leaked
    assert not LeakLabelRow(0, 0, 0).leaked


def _kde_row(qid, z):
    return KdeResult(qid, z, z / 2, z / 3, 1, 2, 1, 10, "gaussian", 0.5, 0)


def _metrics_csv(path, entries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "query_ppl", "length_chars"])
        for qid, ppl in entries:
            w.writerow([qid, repr(ppl), 300])


def test_join_identity_and_disjoint(tmp_path):
    write_results_csv([_kde_row(1, 0.5)], tmp_path / "k.csv")
    _metrics_csv(tmp_path / "m.csv", [(1, 12.5)])
    res = join_density_metrics(tmp_path / "k.csv", tmp_path / "m.csv")
    assert len(res.rows) == 1 and res.unmatched_kde == [] == res.unmatched_metrics
    _metrics_csv(tmp_path / "m2.csv", [(2, 1.0)])
    res = join_density_metrics(tmp_path / "k.csv", tmp_path / "m2.csv")
    assert res.rows == [] and res.unmatched_kde == [1] and res.unmatched_metrics == [2]


def test_join_duplicates(tmp_path):
    write_results_csv([_kde_row(1, 0.5), _kde_row(1, 0.4)], tmp_path / "k.csv")
    _metrics_csv(tmp_path / "m.csv", [(1, 1.0)])
    with pytest.raises(DuplicateKeyError):
        join_density_metrics(tmp_path / "k.csv", tmp_path / "m.csv")
    write_results_csv([_kde_row(1, 0.5)], tmp_path / "k1.csv")
    _metrics_csv(tmp_path / "m1.csv", [(1, 1.0), (1, 2.0)])
    with pytest.raises(DuplicateKeyError):
        join_density_metrics(tmp_path / "k1.csv", tmp_path / "m1.csv")


def test_join_large_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ids = rng.permutation(12_000)[:10_000]
    vals = rng.standard_normal(10_000) * 1e3
    write_results_csv([_kde_row(int(i), float(rng.uniform())) for i in ids], tmp_path / "k.csv")
    _metrics_csv(tmp_path / "m.csv", list(zip(ids.tolist(), vals.tolist())))
    res = join_density_metrics(tmp_path / "k.csv", tmp_path / "m.csv")
    assert len(res.rows) == 10_000
    expected = dict(zip(ids.tolist(), vals.tolist()))
    assert all(m.metrics["query_ppl"] == expected[m.query_id] for _, m in res.rows)


def test_bins_csv(tmp_path):
    write_bins_csv(equal_mass_bins([(0.0, 1.0), (1.0, 3.0)], 1), tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_bytes() == b"index,count,mean_x,mean_y\r\n0,2,0.5,2.0\r\n"
