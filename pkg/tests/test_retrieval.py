import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptkbcir.data import Document
from ptkbcir.errors import ValidationError
from ptkbcir.retrieval import (
    EmbeddingClient,
    EmbeddingStore,
    bm25_score,
    build_index,
    dump_index,
    load_index,
    load_store,
    save_index,
    search_dense,
    search_sparse,
    tokenize,
    write_vectors,
)
from mock_services import MockEmbed
from oracle import brute_force_bm25, random_corpus

THREE = [Document("d1", "apple banana"), Document("d2", "apple apple cherry"), Document("d3", "cherry")]


def test_tokenize():
    assert tokenize("Apple, apple!") == ["apple", "apple"]
    assert tokenize("") == []
    assert tokenize("gluten-free diets") == ["gluten", "free", "diets"]
    assert tokenize("gluten-free diets", stem=True) == ["gluten", "free", "diet"]


def test_build_index_counts():
    idx = build_index(THREE, stem=False)
    assert idx.doc_count == 3
    assert idx.avg_doc_length == 2.0
    assert idx.tf("apple", idx.internal_id("d2")) == 2
    assert build_index([Document("x", "k k k k")]).tf("k", 0) == 4
    with pytest.raises(ValidationError, match="d1"):
        build_index([Document("d1", "a"), Document("d1", "b")])


def test_empty_index():
    idx = build_index([])
    assert idx.doc_count == 0
    assert search_sparse(idx, "anything", 10) == []


def test_bm25_hand_values():
    idx = build_index(THREE, stem=False)
    assert bm25_score(idx, ["apple"], "d2") == pytest.approx(0.3052, abs=1e-4)
    assert bm25_score(idx, ["apple"], "d1") == pytest.approx(0.2474, abs=1e-4)
    assert bm25_score(idx, ["durian"], "d1") == 0.0


def test_search_sparse_examples():
    idx = build_index(THREE, stem=False)
    assert [d for d, _ in search_sparse(idx, "apple", 10)] == ["d2", "d1"]
    assert [d for d, _ in search_sparse(idx, "apple", 1)] == ["d2"]
    assert search_sparse(idx, "durian", 10) == []


def test_identical_docs_tie_by_id():
    idx = build_index([Document("b", "x y"), Document("a", "x y"), Document("c", "z")])
    res = search_sparse(idx, "x", 10)
    assert [d for d, _ in res] == ["a", "b"]
    assert res[0][1] == res[1][1]


def test_sparse_matches_brute_force():
    rng = random.Random(11)
    docs = random_corpus(rng, 300)
    idx = build_index(docs)
    for _ in range(5):
        q = " ".join(rng.choices([f"w{i}" for i in range(70)], k=3))
        got = search_sparse(idx, q, 50)
        want = brute_force_bm25(docs, q, 50)
        assert [d for d, _ in got] == [d for d, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-9)


def test_index_save_load(tmp_path):
    idx = build_index(THREE)
    save_index(idx, tmp_path / "i.idx")
    back = load_index(tmp_path / "i.idx")
    assert search_sparse(back, "apple", 5) == search_sparse(idx, "apple", 5)
    assert dump_index(back) == dump_index(idx)
    (tmp_path / "bad.idx").write_bytes(b"NOT AN INDEX\n{}")
    with pytest.raises(Exception):
        load_index(tmp_path / "bad.idx")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 5))
def test_more_matches_never_lowers_score(extra_a, extra_b):
    # same length docs, one has more occurrences of the query term
    lo, hi = min(extra_a, extra_b), max(extra_a, extra_b)
    docs = [
        Document("lo", " ".join(["t"] * lo + ["f"] * (10 - lo))),
        Document("hi", " ".join(["t"] * hi + ["f"] * (10 - hi))),
        Document("other", "g g g"),
    ]
    idx = build_index(docs, stem=False)
    assert bm25_score(idx, ["t"], "hi") >= bm25_score(idx, ["t"], "lo")


def test_dense_examples():
    store = EmbeddingStore({"dA": [1.0, 0.0], "dB": [0.0, 1.0]})
    assert search_dense(store, [1.0, 0.0], 2) == [("dA", 1.0), ("dB", 0.0)]
    res = search_dense(store, [0.6, 0.8], 2)
    assert [d for d, _ in res] == ["dB", "dA"]
    assert res[0][1] == pytest.approx(0.8) and res[1][1] == pytest.approx(0.6)
    assert len(search_dense(store, [1.0, 0.0], 10)) == 2


def test_dense_rejects_bad_vectors():
    with pytest.raises(ValidationError):
        EmbeddingStore({"a": [1.0, 2.0], "b": [1.0]})
    with pytest.raises(ValidationError):
        EmbeddingStore({"a": [float("nan"), 1.0]})
    store = EmbeddingStore({"a": [1.0, 2.0]})
    with pytest.raises(ValidationError):
        search_dense(store, [1.0, 2.0, 3.0], 1)


def test_dense_matches_exhaustive_small():
    rng = np.random.default_rng(5)
    vecs = {f"d{i:03d}": rng.normal(size=8).tolist() for i in range(200)}
    store = EmbeddingStore(vecs)
    q = rng.normal(size=8)
    want = sorted(((d, float(np.dot(v, q))) for d, v in vecs.items()), key=lambda x: (-x[1], x[0]))[:20]
    assert [d for d, _ in search_dense(store, q, 20)] == [d for d, _ in want]


def test_vector_file_round_trip(tmp_path):
    vecs = {"b": [0.1, 1e-17], "a": [1 / 3, -2.0]}
    (tmp_path / "v.tsv").write_bytes(write_vectors(vecs))
    store = load_store(tmp_path / "v.tsv")
    assert store.vector("a").tolist() == vecs["a"]


def test_embedding_cache(tmp_path):
    mock = MockEmbed()
    client = EmbeddingClient("http://e.test", "m", cache_path=tmp_path / "c.jsonl", transport=mock.transport, backoff=0)
    assert client.embed_texts([]) == []
    a = client.embed_texts(["hello world", "hello world", "bye"])
    assert a[0] == a[1]
    assert len(client.calls) == 1 and mock.requests == [["hello world", "bye"]]
    client.embed_texts(["bye"])
    assert len(client.calls) == 1


def test_embedding_cache_file_is_byte_stable(tmp_path):
    files = []
    for name in ("one", "two"):
        path = tmp_path / f"{name}.jsonl"
        client = EmbeddingClient("http://e.test", "m", cache_path=path, transport=MockEmbed().transport, batch_size=2)
        client.embed_texts(["a b", "c", "d e f", "g"])
        files.append(path.read_bytes())
    assert files[0] == files[1]
