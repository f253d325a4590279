"""
Hybrid index: tokenizer, BM25, exact kNN and reciprocal rank fusion against brute-force oracles
"""

import math
import random
from collections import Counter

import numpy as np
import pytest

from spark_memory.errors import ValidationError
from spark_memory.gateway import StubProvider
from spark_memory.config import ProviderConfig
from spark_memory.index import (
    BM25_B,
    BM25_K1,
    CHANNEL_ORDER,
    Channel,
    RankedHit,
    bm25_search,
    build_doc_indexes,
    build_lexical,
    build_vector,
    extract_symbols,
    fuse,
    knn_search,
    load_doc_indexes,
    save_doc_indexes,
    tokenize,
)
from spark_memory.models import DocBlob

TRIALS = 500
VOCAB = [
    "alpha", "beta", "gamma", "delta", "frame", "index", "sort", "array",
    "value", "merge", "tz_localize", "groupBy", "pivot_table", "Series",
]


def random_ref(rng):
    return "".join(rng.choice("abcdefghij") for _ in range(4)) + str(rng.randrange(1000))


# ============================================================================
# TOKENIZER
# ============================================================================

def test_tokenize_splits_identifiers():
    assert tokenize("tz_localize") == ["tz", "localize", "tz_localize"]
    assert tokenize("groupBy") == ["group", "by", "groupby"]
    assert tokenize("Merge the frames") == ["merge", "the", "frames"]
    assert tokenize("") == []


def test_extract_symbols_first_mention_order():
    text = "Use `df.groupby` then call tz_localize() on s.dt and tz_localize again"
    assert extract_symbols(text) == ["df", "groupby", "tz_localize", "dt"]
    assert extract_symbols("Use the merge function") == []


# ============================================================================
# BM25
# ============================================================================

def bm25_oracle(docs, query, k):
    tokens = {ref: tokenize(text) for ref, text in docs}
    n = len(docs)
    avgdl = sum(len(t) for t in tokens.values()) / n
    terms = sorted(set(tokenize(query)))
    scores = {}
    for ref, toks in tokens.items():
        counts = Counter(toks)
        dl = len(toks)
        total, matched = 0.0, False
        for term in terms:
            if counts[term] == 0:
                continue
            n_t = sum(1 for other in tokens.values() if term in other)
            idf = math.log(1 + (n - n_t + 0.5) / (n_t + 0.5))
            tf = float(counts[term])
            total += idf * (tf * (BM25_K1 + 1)) / (tf + BM25_K1 * (1 - BM25_B + BM25_B * dl / avgdl))
            matched = True
        if matched:
            scores[ref] = total
    return sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]


def test_bm25_matches_oracle():
    """Membership, order and scores agree with a brute-force BM25 on random corpora"""
    rng = random.Random(1234)
    for _ in range(TRIALS):
        n_docs = rng.randint(1, 50)
        refs = rng.sample(sorted({random_ref(rng) for _ in range(200)}), n_docs)
        docs = [(ref, " ".join(rng.choice(VOCAB) for _ in range(rng.randint(0, 12)))) for ref in refs]
        query = " ".join(rng.choice(VOCAB + ["missing"]) for _ in range(rng.randint(1, 4)))
        k = rng.randint(1, 60)

        index = build_lexical(docs, "blob")
        got = bm25_search(index, query, k)
        expected = bm25_oracle(docs, query, k)
        assert [h.doc_ref for h in got] == [ref for ref, _ in expected]
        for hit, (_, score) in zip(got, expected):
            assert abs(hit.score - score) <= 1e-9
            assert hit.source_channel == Channel.LEXICAL_BLOB


def test_bm25_duplicate_query_terms_count_once():
    index = build_lexical([("a", "sort array"), ("b", "sort sort value")], "blob")
    assert bm25_search(index, "sort sort sort", 5) == bm25_search(index, "sort", 5)


def test_build_lexical_rejects_duplicates_and_bad_scope():
    with pytest.raises(ValidationError):
        build_lexical([("a", "x"), ("a", "y")], "blob")
    with pytest.raises(ValidationError):
        build_lexical([("a", "x")], "paragraph")


def test_lexical_index_introspection():
    index = build_lexical([("a", "sort the array"), ("b", "array value")], "section")
    assert index.channel == Channel.LEXICAL_SECTION
    assert index.postings("array") == [("a", 1), ("b", 1)]
    assert index.doc_lengths == {"a": 3, "b": 2}
    assert index.avg_doc_length == 2.5
    assert "value" in index.terms


# ============================================================================
# kNN
# ============================================================================

def quantized_unit(rng, dim=16):
    """Four entries of +-0.5: unit norm with dot products exact in floating point"""
    vector = [0.0] * dim
    for position in rng.sample(range(dim), 4):
        vector[position] = rng.choice((0.5, -0.5))
    return vector


def test_knn_matches_oracle():
    rng = random.Random(99)
    for _ in range(TRIALS):
        n = rng.randint(1, 50)
        refs = rng.sample(sorted({random_ref(rng) for _ in range(200)}), n)
        entries = [(ref, quantized_unit(rng)) for ref in refs]
        query = quantized_unit(rng)
        k = rng.randint(1, 60)

        got = knn_search(build_vector(entries, 16), query, k)
        expected = sorted(
            ((ref, sum(a * b for a, b in zip(vec, query))) for ref, vec in entries),
            key=lambda item: (-item[1], item[0]),
        )[:k]
        assert [h.doc_ref for h in got] == [ref for ref, _ in expected]
        for hit, (_, score) in zip(got, expected):
            assert abs(hit.score - score) <= 1e-9


def test_knn_orthogonal_basis():
    basis = [("e0", [1.0, 0.0, 0.0]), ("e1", [0.0, 1.0, 0.0]), ("e2", [0.0, 0.0, 1.0])]
    hits = knn_search(build_vector(basis, 3), [0.0, 1.0, 0.0], 3)
    assert [h.doc_ref for h in hits] == ["e1", "e0", "e2"]
    assert [h.score for h in hits] == [1.0, 0.0, 0.0]


def test_vector_validation():
    with pytest.raises(ValidationError):
        build_vector([("a", [1.0, 0.0])], 3)
    with pytest.raises(ValidationError):
        build_vector([("a", [1.0, 1.0])], 2)
    index = build_vector([("a", [1.0, 0.0])], 2)
    with pytest.raises(ValidationError):
        knn_search(index, [1.0, 0.0, 0.0], 1)
    assert knn_search(build_vector([], 2), [1.0, 0.0], 3) == []


# ============================================================================
# FUSION
# ============================================================================

def fuse_oracle(rankings, k):
    parts, best = {}, {}
    for ranking in rankings:
        for rank, hit in enumerate(ranking, start=1):
            parts.setdefault(hit.doc_ref, []).append(1.0 / (60 + rank))
            key = (rank, CHANNEL_ORDER[hit.source_channel])
            if hit.doc_ref not in best or key < best[hit.doc_ref][0]:
                best[hit.doc_ref] = (key, hit.source_channel)
    scored = [(ref, math.fsum(p), best[ref][1]) for ref, p in parts.items()]
    return sorted(scored, key=lambda item: (-item[1], item[0]))[:k]


def random_rankings(rng):
    pool = sorted({random_ref(rng) for _ in range(60)})
    channels = list(Channel)
    rankings = []
    for _ in range(rng.randint(0, 5)):
        refs = rng.sample(pool, rng.randint(0, min(25, len(pool))))
        channel = rng.choice(channels)
        rankings.append([RankedHit(ref, 1.0 / (i + 1), channel) for i, ref in enumerate(refs)])
    return rankings


def test_fuse_matches_oracle():
    rng = random.Random(7)
    for _ in range(TRIALS):
        rankings = random_rankings(rng)
        k = rng.randint(1, 40)
        got = fuse(rankings, k)
        expected = fuse_oracle(rankings, k)
        assert [h.doc_ref for h in got] == [ref for ref, _, _ in expected]
        for hit, (_, score, channel) in zip(got, expected):
            assert abs(hit.score - score) <= 1e-9
            assert hit.source_channel == channel


def test_fuse_ignores_input_order():
    rng = random.Random(11)
    for _ in range(100):
        rankings = random_rankings(rng)
        shuffled = list(rankings)
        rng.shuffle(shuffled)
        assert fuse(rankings, 30) == fuse(shuffled, 30)


def test_fuse_edges():
    assert fuse([], 5) == []
    hits = [RankedHit("a", 3.0, Channel.VECTOR)]
    assert fuse([hits], 0) == []
    fused = fuse([hits, [RankedHit("a", 9.0, Channel.LEXICAL_BLOB)]], 5)
    assert fused[0].score == pytest.approx(2 / 61)
    assert fused[0].source_channel == Channel.LEXICAL_BLOB


# ============================================================================
# MONOTONE k
# ============================================================================

def assert_prefixes(search, k):
    """The top-j list is the first j entries of the top-k list for every j <= k"""
    full = search(k)
    assert len(full) <= k
    for j in range(k + 1):
        assert search(j) == full[:j]


def test_top_k_lists_are_prefix_stable():
    rng = random.Random(31)
    for _ in range(TRIALS):
        refs = rng.sample(sorted({random_ref(rng) for _ in range(200)}), rng.randint(1, 40))
        k = rng.randint(1, 45)

        docs = [(ref, " ".join(rng.choice(VOCAB) for _ in range(rng.randint(0, 8)))) for ref in refs]
        lexical = build_lexical(docs, "symbol")
        query = " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 3)))
        assert_prefixes(lambda j: bm25_search(lexical, query, j), k)

        vectors = build_vector([(ref, quantized_unit(rng)) for ref in refs], 16)
        query_vec = quantized_unit(rng)
        assert_prefixes(lambda j: knn_search(vectors, query_vec, j), k)

        rankings = random_rankings(rng)
        assert_prefixes(lambda j: fuse(rankings, j), k)


# ============================================================================
# BUNDLES
# ============================================================================

def make_docs(toy_docs):
    return [
        DocBlob(
            blob_id=DocBlob.compute_id(d["source"], d["path"], d["body"]),
            source=d["source"], path=d["path"], title=d["title"], body=d["body"],
            symbols=tuple(extract_symbols(d["body"])),
        )
        for d in toy_docs
    ]


def test_doc_indexes_save_and_load(tmp_path, toy_docs):
    stub = StubProvider(ProviderConfig())
    embed = lambda texts: stub.embed(texts)[0]
    docs = make_docs(toy_docs)
    indexes = build_doc_indexes(docs, "docs-6-abc", embed, stub.dim)
    assert indexes.doc_count == len(docs)

    path = tmp_path / "docs.npz"
    save_doc_indexes(indexes, path)
    loaded = load_doc_indexes(path, "docs-6-abc")
    assert loaded is not None
    for scope in ("blob", "section", "symbol"):
        assert bm25_search(getattr(loaded, scope), "groupby merge key", 10) == \
            bm25_search(getattr(indexes, scope), "groupby merge key", 10)
    query = embed(["merge frames on a key"])[0]
    assert knn_search(loaded.vectors, query, 4) == knn_search(indexes.vectors, query, 4)

    assert load_doc_indexes(path, "docs-7-other") is None
    assert load_doc_indexes(tmp_path / "missing.npz", "docs-6-abc") is None
    (tmp_path / "broken.npz").write_bytes(b"not a zip")
    assert load_doc_indexes(tmp_path / "broken.npz", "docs-6-abc") is None


def test_doc_indexes_use_stored_embeddings(toy_docs):
    docs = make_docs(toy_docs[:2])
    unit = tuple(np.eye(4)[0])
    docs[0] = DocBlob(**{**docs[0].__dict__, "embedding": unit})
    calls = []

    def embed(texts):
        calls.append(list(texts))
        return [tuple(np.eye(4)[1]) for _ in texts]

    indexes = build_doc_indexes(docs, "v", embed, 4)
    assert len(calls) == 1 and len(calls[0]) == 1
    assert knn_search(indexes.vectors, unit, 1)[0].doc_ref == docs[0].blob_id
