import csv
import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamav.data import DataConfig, SyntheticDataset
from siamav.eval import (
    MetricError,
    average_precision,
    bench_masking,
    embeddings_csv,
    export_embeddings,
    match_ranks,
    mean_average_precision,
    recall_at_k,
    retrieval_report,
    similarity_matrix,
    top1_accuracy,
)
from siamav.mask import DEFAULT_RATIOS
from siamav.model import ModelConfig, SiameseAV
from siamav.tensor import ShapeError, no_grad

# -- retrieval -------------------------------------------------------------------


def test_recall_examples():
    assert recall_at_k(np.eye(5), 1) == 1.0
    s = np.zeros((4, 4))
    np.fill_diagonal(s, -1)
    assert recall_at_k(s, 1) == 0.0
    assert recall_at_k(s, 4) == 1.0


def rank_oracle(S):
    n = S.shape[0]
    out = []
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-S[i, j], j))
        out.append(order.index(i))
    return np.array(out)


@given(seed=st.integers(0, 10**6), ties=st.booleans())
def test_ranks_match_full_sort_oracle(seed, ties):
    r = np.random.default_rng(seed)
    S = r.standard_normal((8, 8))
    if ties:
        S = np.round(S)
    assert np.array_equal(match_ranks(S), rank_oracle(S))
    rec = [recall_at_k(S, k) for k in range(1, 9)]
    assert all(a <= b for a, b in zip(rec, rec[1:]))
    assert rec[-1] == 1.0


def test_ties_resolve_to_lowest_index():
    assert np.array_equal(match_ranks(np.ones((3, 3))), [0, 1, 2])


def test_transpose_protocol(rng):
    S = rng.standard_normal((6, 6))
    rep = retrieval_report(S, ks=(1, 5))
    assert rep["v2a"]["R@1"] == recall_at_k(S.T, 1)
    assert rep["a2v"]["R@5"] == recall_at_k(S, 5)


def test_retrieval_errors():
    with pytest.raises(ShapeError):
        match_ranks(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        recall_at_k(np.eye(3), 0)
    with pytest.raises(MetricError):
        similarity_matrix(np.zeros((2, 3)), np.ones((2, 3)))


# -- classification -----------------------------------------------------------------


def ap_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, []
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total.append(hits / rank)
    return math.fsum(total) / len(total)


def test_ap_examples():
    labels = np.array([[1, 0], [1, 0], [0, 1], [0, 0]])
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.7], [0.0, 0.0]])
    assert mean_average_precision(scores, labels) == 1.0
    assert average_precision(np.arange(10, 0, -1), np.eye(10)[9]) == pytest.approx(1 / 10)


def test_map_brute_force_oracle(rng):
    scores = rng.random((16, 4))
    labels = (rng.random((16, 4)) < 0.4).astype(int)
    labels[0] = 1
    want = np.mean([ap_oracle(scores[:, c], labels[:, c]) for c in range(4)])
    assert abs(mean_average_precision(scores, labels) - want) <= 1e-9


@given(seed=st.integers(0, 10**6))
def test_map_invariant_under_monotone_transform(seed):
    r = np.random.default_rng(seed)
    scores = r.standard_normal((12, 3))
    labels = (r.random((12, 3)) < 0.5).astype(int)
    labels[0] = 1
    base = mean_average_precision(scores, labels)
    assert mean_average_precision(np.exp(scores) * 3 + 1, labels) == base
    assert mean_average_precision(np.arctan(scores), labels) == base


def test_map_errors():
    with pytest.raises(MetricError):
        mean_average_precision(np.ones((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        mean_average_precision(np.ones((3, 2)), np.zeros((3, 3)))


def test_top1_examples(rng):
    labels = rng.integers(0, 5, 20)
    assert top1_accuracy(np.eye(5)[labels], labels) == 1.0
    logits = rng.standard_normal((20, 5))
    shifted = logits + rng.standard_normal((20, 1)) * 10
    want = sum(int(np.argmax(row) == y) for row, y in zip(logits, labels)) / 20
    assert top1_accuracy(logits, labels) == want == top1_accuracy(shifted, labels)


# -- throughput ------------------------------------------------------------------------


def test_bench_token_accounting_at_full_geometry():
    cfg = ModelConfig(d=16, encoder_depth=1, heads=2, mm_depth=1, dec_depth=1, dec_width=8, dec_heads=2)
    hi, lo = bench_masking(cfg, [(0.75,), (0.25,)], n_steps=1, batch_size=2)
    assert (hi.audio_kept_per_sample, lo.audio_kept_per_sample) == (128, 384)
    assert hi.total_tokens_per_sample == 708


def test_bench_multi_ratio_keeps_three_quarters(tiny):
    (rep,) = bench_masking(tiny.model, [DEFAULT_RATIOS], n_steps=2, batch_size=12)
    assert rep.mean_ratio == 0.25
    assert rep.expected_kept_per_sample == pytest.approx(0.75 * 48)
    assert rep.measured_kept_per_sample == pytest.approx(0.75 * 48)
    assert rep.to_dict()["ratios"] == list(DEFAULT_RATIOS)


# -- export --------------------------------------------------------------------------------


@pytest.fixture
def micro_setup(micro_cfg):
    ds = SyntheticDataset(DataConfig(K=2, n_train=4, n_eval=5, max_classes=2), (32, 32), (32, 16))
    return SiameseAV(micro_cfg, 0), ds


def test_export_rows_and_bytes(tmp_path, micro_setup):
    model, ds = micro_setup
    assert export_embeddings(model, ds, tmp_path / "a.csv") == 10
    export_embeddings(model, ds, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(io.StringIO((tmp_path / "a.csv").read_text())))
    assert rows[0][:4] == ["id", "modality", "labels", "e_0"] and len(rows[0]) == 3 + 16
    assert [r[1] for r in rows[1:3]] == ["a", "v"]


def test_exported_embedding_is_token_mean(micro_setup):
    model, ds = micro_setup
    rows = list(csv.reader(io.StringIO(embeddings_csv(model, ds).decode())))[1:]
    for row, (i, mod) in zip(rows, itertools.product(ds.indices("eval"), ("a", "v"))):
        inst = ds.instance(i)
        with no_grad():
            if mod == "a":
                toks = model.encode(model.embed(inst.spectrogram[None], "audio")).tokens.values.data[0]
            else:
                toks = model.encode(model.embed(inst.image[None], "visual")).tokens.values.data[0]
        assert int(row[0]) == i and row[1] == mod
        assert row[2] == ";".join(map(str, inst.classes))
        assert np.abs(np.array(row[3:], dtype=float) - toks.mean(axis=0)).max() <= 1e-6


def test_export_unwritable_path(micro_setup, tmp_path):
    model, ds = micro_setup
    (tmp_path / "f").write_text("")
    with pytest.raises(OSError):
        export_embeddings(model, ds, tmp_path / "f" / "x.csv")
