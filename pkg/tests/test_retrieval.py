import threading

import numpy as np
import pytest

from cada.errors import EvaluationError, ValidationError
from cada.retrieval import (
    GalleryIndex,
    QuerySet,
    average_precision,
    build_gallery,
    evaluate,
    global_rank,
    local_rerank,
    mean_ap,
    rank_from_scores,
    rank_k,
)


class StubScorer:
    """Match probability is read off the first image token."""

    def __init__(self):
        self.decoder_calls = 0
        self.lock = threading.Lock()

    def match_probability(self, image_tokens, tokens):
        with self.lock:
            self.decoder_calls += len(image_tokens)
        return np.asarray(image_tokens)[:, 0, 0].astype(np.float64)


def stub_inputs(n_queries, probs, rng):
    n_gallery = len(probs)
    gallery = GalleryIndex(
        vectors=np.eye(n_gallery),
        identities=np.arange(n_gallery) % 4,
        image_tokens=np.asarray(probs, dtype=np.float64).reshape(n_gallery, 1, 1),
    )
    queries = QuerySet(
        vectors=np.zeros((n_queries, n_gallery)),
        identities=rng.integers(0, 4, n_queries),
        enc_ids=np.zeros((n_queries, 4), dtype=np.int64),
        pad_mask=np.zeros((n_queries, 4), dtype=bool),
    )
    return queries, gallery


def reference_metrics(scores, relevant, k):
    aps, hits_at_k = [], []
    for row, rel in zip(scores, relevant):
        order = sorted(range(len(row)), key=lambda g: (-row[g], g))
        hits, precisions = 0, []
        for position, g in enumerate(order, start=1):
            if rel[g]:
                hits += 1
                precisions.append(hits / position)
        aps.append(sum(precisions) / len(precisions))
        hits_at_k.append(any(rel[g] for g in order[:k]))
    return sum(aps) / len(aps), sum(hits_at_k) / len(hits_at_k)


def test_average_precision_example():
    assert average_precision(np.array([1, 0, 1, 0, 0], dtype=bool)) == pytest.approx(5 / 6)


def test_rank_k_example():
    ranked = np.zeros((2, 10), dtype=bool)
    ranked[0, 2] = True
    ranked[1, 6] = True
    assert rank_k(ranked, 5) == 0.5
    assert rank_k(ranked, 7) == 1.0
    assert mean_ap(ranked) == pytest.approx((1 / 3 + 1 / 7) / 2)


def test_metrics_against_brute_force():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        scores = rng.normal(size=(20, 50)).round(1)
        gallery_ids = np.concatenate([np.arange(5), rng.integers(0, 5, 45)])
        relevant = rng.integers(0, 5, 20)[:, None] == gallery_ids[None, :]
        result = rank_from_scores(scores, relevant)
        expected_map, expected_r5 = reference_metrics(scores, relevant, 5)
        assert abs(mean_ap(result) - expected_map) < 1e-12
        assert abs(rank_k(result, 5) - expected_r5) < 1e-12


def test_ties_go_to_lower_index():
    result = rank_from_scores(np.zeros((1, 6)), np.ones((1, 6), dtype=bool))
    assert result.order[0].tolist() == list(range(6))


def test_query_without_relevant_item():
    result = rank_from_scores(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]], dtype=bool))
    with pytest.raises(EvaluationError, match=r"\[1\]"):
        mean_ap(result)


def test_empty_scores():
    with pytest.raises(ValidationError):
        rank_from_scores(np.zeros((2, 0)), np.zeros((2, 0), dtype=bool))


def test_rerank_eta_zero_is_global(rng):
    queries, gallery = stub_inputs(100, rng.random(40), rng)
    scores = rng.random((100, 40))
    base = rank_from_scores(scores, queries.identities[:, None] == gallery.identities[None, :])
    model = StubScorer()
    reranked = local_rerank(base, 0, model, queries, gallery)
    assert np.array_equal(reranked.order, base.order)
    assert model.decoder_calls == reranked.decoder_calls == 0


def test_rerank_counts_and_tail(rng):
    queries, gallery = stub_inputs(5, rng.random(40), rng)
    scores = rng.random((5, 40))
    base = rank_from_scores(scores, queries.identities[:, None] == gallery.identities[None, :])
    model = StubScorer()
    reranked = local_rerank(base, 32, model, queries, gallery, chunk=2)
    assert model.decoder_calls == reranked.decoder_calls == 32 * 5
    assert np.array_equal(reranked.order[:, 32:], base.order[:, 32:])
    for q in range(5):
        assert sorted(reranked.order[q, :32]) == sorted(base.order[q, :32])
        block = reranked.final[q, reranked.order[q, :32]]
        assert np.all(np.diff(block) <= 0)
        outside = np.setdiff1d(np.arange(40), base.order[q, :32])
        assert np.isnan(reranked.s_local[q, outside]).all()


def test_rerank_can_promote(rng):
    probs = np.zeros(6)
    probs[1] = 1.0
    queries, gallery = stub_inputs(1, probs, rng)
    scores = np.array([[0.9, 0.5, 0.4, 0.3, 0.2, 0.1]])
    base = rank_from_scores(scores, np.ones((1, 6), dtype=bool))
    reranked = local_rerank(base, 2, StubScorer(), queries, gallery)
    assert reranked.order[0].tolist() == [1, 0, 2, 3, 4, 5]
    assert reranked.final[0, 1] == pytest.approx(1.5)


def test_rerank_threads_match_serial(rng):
    queries, gallery = stub_inputs(6, rng.random(20), rng)
    base = rank_from_scores(rng.random((6, 20)), queries.identities[:, None] == gallery.identities[None, :])
    serial = local_rerank(base, 8, StubScorer(), queries, gallery)
    threaded = local_rerank(base, 8, StubScorer(), queries, gallery, workers=3, chunk=1)
    assert np.array_equal(serial.order, threaded.order)


class SilentScorer(StubScorer):
    def match_probability(self, image_tokens, tokens):
        return np.asarray(image_tokens)[:, 0, 0].astype(np.float64)


@pytest.mark.parametrize("workers", [1, 3])
def test_uncounted_decoder_calls_raise(rng, workers):
    queries, gallery = stub_inputs(4, rng.random(10), rng)
    base = rank_from_scores(rng.random((4, 10)), queries.identities[:, None] == gallery.identities[None, :])
    with pytest.raises(EvaluationError, match="decoder calls"):
        local_rerank(base, 3, SilentScorer(), queries, gallery, workers=workers, chunk=1)


def test_eta_bounds(rng):
    queries, gallery = stub_inputs(1, rng.random(4), rng)
    base = rank_from_scores(rng.random((1, 4)), np.ones((1, 4), dtype=bool))
    with pytest.raises(ValidationError):
        local_rerank(base, 5, StubScorer(), queries, gallery)


def test_gallery_dedups_images(tiny_model, corpus):
    test = corpus.split("test")
    gallery = build_gallery(tiny_model, test)
    assert len(gallery) == 4
    assert np.allclose(np.linalg.norm(gallery.vectors, axis=1), 1.0)


def test_evaluate_tiny_model(tiny_model, corpus):
    test = corpus.split("test")
    report = evaluate(tiny_model, test, corpus.vocab, corpus.lexicon, protocol="local", eta=4, max_len=16)
    m = report.metrics
    assert (m["n_queries"], m["n_gallery"], m["eta"]) == (8, 4, 4)
    assert m["decoder_calls"] == 32
    for key in ("rank1", "rank5", "rank10", "map", "mam_accuracy"):
        assert 0.0 <= m[key] <= 1.0
    assert m["rank5"] == 1.0
    frame = report.top_k_frame(10)
    assert len(frame) == 8
    assert "top4_score" in frame.columns and "top5" not in frame.columns


def test_local_with_eta_zero_equals_global(tiny_model, corpus):
    test = corpus.split("test")
    a = evaluate(tiny_model, test, corpus.vocab, protocol="global", max_len=16)
    b = evaluate(tiny_model, test, corpus.vocab, protocol="local", eta=0, max_len=16)
    assert np.array_equal(a.result.order, b.result.order)
    assert a.metrics["map"] == b.metrics["map"]


def test_unknown_protocol(tiny_model, corpus):
    with pytest.raises(ValidationError):
        evaluate(tiny_model, corpus.split("test"), corpus.vocab, protocol="hybrid")


def test_global_rank_uses_cosine(rng):
    queries, gallery = stub_inputs(2, rng.random(3), rng)
    queries.vectors = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    result = global_rank(queries, gallery)
    assert result.order[:, 0].tolist() == [1, 2]


def test_threaded_evaluation_counts_every_call(tiny_model, corpus):
    test = corpus.split("test")
    serial = evaluate(tiny_model, test, corpus.vocab, protocol="local", eta=4, max_len=16)
    tiny_model.decoder_calls = 0
    threaded = evaluate(tiny_model, test, corpus.vocab, protocol="local", eta=4, max_len=16, workers=3)
    assert threaded.metrics["decoder_calls"] == tiny_model.decoder_calls == 32
    assert np.array_equal(serial.result.order, threaded.result.order)
