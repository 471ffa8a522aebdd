###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
"""
Two-stage text-to-image retrieval and its metrics.

Global stage: cosine similarity S_G between projected [CLS] features, full
sort per query. Local stage: the top-eta candidates of each query are fused
by the decoder and get S_G + S_L, S_L being the [ENC]-group match
probability; everything below the top-eta block keeps its global order.
Ties always go to the lower gallery index.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import time

import numpy as np
import pandas as pd
from logbook import Logger

from cada import numerics as nx
from cada.errors import EvaluationError, ValidationError
from cada.textproc import CLS, ENC_ID, mask_attributes, tokenize

log = Logger("cada.retrieval")

PROTOCOLS = ("global", "local")


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


@dataclass
class GalleryIndex:
    vectors: np.ndarray
    identities: np.ndarray
    image_tokens: np.ndarray
    image_paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.identities)


@dataclass
class QuerySet:
    vectors: np.ndarray
    identities: np.ndarray
    enc_ids: np.ndarray
    pad_mask: np.ndarray
    captions: list = field(default_factory=list)

    def __len__(self):
        return len(self.identities)


@dataclass
class RankingResult:
    """
    ``order[q]`` lists gallery indices best first. ``s_local`` is NaN outside
    each query's reranked block. ``relevant[q, g]`` flags same identity.
    """

    order: np.ndarray
    s_global: np.ndarray
    s_local: np.ndarray
    final: np.ndarray
    relevant: np.ndarray
    eta: int = 0
    decoder_calls: int = 0

    def ranked_relevance(self):
        return np.take_along_axis(self.relevant, self.order, axis=1)


def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def build_gallery(model, records, chunk=64):
    """Encode every distinct image of ``records`` once."""
    seen, images, identities, paths = set(), [], [], []
    for r in records:
        if r.image_path in seen:
            continue
        seen.add(r.image_path)
        images.append(r.image)
        identities.append(r.identity_id)
        paths.append(r.image_path)
    if not images:
        raise ValidationError("cannot build an empty gallery")
    images = np.stack(images)
    vectors, tokens = [], []
    with nx.no_grad():
        for a, b in _chunks(len(images), chunk):
            image_tokens, proj = model.embed_images(images[a:b])
            tokens.append(image_tokens.data)
            vectors.append(proj.data)
    return GalleryIndex(_unit_rows(np.concatenate(vectors)), np.asarray(identities), np.concatenate(tokens), paths)


def encode_queries(model, records, vocab, max_len=24, chunk=64):
    """Project every caption of ``records``."""
    tokens = [tokenize(r.caption, vocab, max_len, leading=CLS) for r in records]
    cls_ids = np.stack([t.ids for t in tokens])
    pad_mask = np.stack([t.pad_mask for t in tokens])
    enc_ids = cls_ids.copy()
    enc_ids[:, 0] = ENC_ID
    vectors = []
    with nx.no_grad():
        for a, b in _chunks(len(tokens), chunk):
            _, proj = model.embed_texts((cls_ids[a:b], pad_mask[a:b]))
            vectors.append(proj.data)
    return QuerySet(
        _unit_rows(np.concatenate(vectors)),
        np.asarray([r.identity_id for r in records]),
        enc_ids,
        pad_mask,
        [r.caption for r in records],
    )


def rank_from_scores(scores, relevant):
    """RankingResult from a plain (Q, G) score matrix; used by global_rank and the metric checks."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise ValidationError(f"need a non-empty (queries, gallery) score matrix, got {scores.shape}")
    order = np.argsort(-scores, axis=1, kind="stable")
    return RankingResult(
        order=order,
        s_global=scores,
        s_local=np.full(scores.shape, np.nan),
        final=scores.copy(),
        relevant=np.asarray(relevant, dtype=bool),
    )


def global_rank(queries, gallery):
    if len(gallery) == 0:
        raise ValidationError("gallery is empty")
    s_global = queries.vectors @ gallery.vectors.T
    relevant = queries.identities[:, None] == gallery.identities[None, :]
    return rank_from_scores(s_global, relevant)


def local_rerank(result, eta, model, queries, gallery, workers=1, chunk=16):
    """
    Add S_L to the top-eta global candidates of each query and re-sort that block.

    Exactly ``eta * len(queries)`` (image, text) pairs go through the decoder.
    """
    n_queries, n_gallery = result.s_global.shape
    if not 0 <= eta <= n_gallery:
        raise ValidationError(f"eta must lie in [0, {n_gallery}], got {eta}")
    order = result.order.copy()
    s_local = np.full(result.s_global.shape, np.nan)
    final = result.s_global.copy()
    if eta == 0:
        return RankingResult(order, result.s_global, s_local, final, result.relevant, 0, 0)

    def score(span):
        a, b = span
        out = []
        for q in range(a, b):
            candidates = order[q, :eta].copy()
            enc = np.repeat(queries.enc_ids[q : q + 1], eta, axis=0)
            mask = np.repeat(queries.pad_mask[q : q + 1], eta, axis=0)
            out.append((q, candidates, model.match_probability(gallery.image_tokens[candidates], (enc, mask))))
        return out

    spans = _chunks(n_queries, chunk)
    calls_before = model.decoder_calls
    with nx.no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scored = [item for part in pool.map(score, spans) for item in part]
        else:
            scored = [item for span in spans for item in score(span)]

    for q, candidates, probs in scored:
        s_local[q, candidates] = probs
        final[q, candidates] = result.s_global[q, candidates] + probs
        block = sorted(candidates.tolist(), key=lambda g: (-final[q, g], g))
        order[q, :eta] = block
    calls = eta * n_queries
    if model.decoder_calls - calls_before != calls:
        raise EvaluationError(f"expected {calls} decoder calls, made {model.decoder_calls - calls_before}")
    return RankingResult(order, result.s_global, s_local, final, result.relevant, eta, calls)


def _ranked(results):
    ranked = results.ranked_relevance() if isinstance(results, RankingResult) else np.asarray(results, dtype=bool)
    missing = np.flatnonzero(~ranked.any(axis=1))
    if missing.size:
        raise EvaluationError(f"queries without a relevant gallery item: {missing.tolist()}")
    return ranked


def rank_k(results, k):
    """Fraction of queries with a relevant item in the top ``k``."""
    ranked = _ranked(results)
    return float(ranked[:, :k].any(axis=1).mean())


def average_precision(ranked_row):
    hits = np.flatnonzero(ranked_row)
    precisions = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precisions.mean())


def mean_ap(results):
    ranked = _ranked(results)
    return float(np.mean([average_precision(row) for row in ranked]))


def masked_attribute_accuracy(model, records, vocab, lexicon, max_len=24, chunk=64):
    """
    Top-1 accuracy of the masked-word head over every attribute token, each
    caption decoded against its own image with all attribute phrases masked.
    """
    rng = np.random.default_rng(0)
    rows = []
    for r in records:
        tokens = tokenize(r.caption, vocab, max_len, leading=CLS, lexicon=lexicon).with_leading(ENC_ID)
        masked = mask_attributes(tokens, tokens.attribute_spans, 1.0, rng)
        if masked.n_masked:
            rows.append((r.image, masked, tokens.pad_mask))
    if not rows:
        raise EvaluationError("no attribute phrase to predict")
    correct = total = 0
    with nx.no_grad():
        for a, b in _chunks(len(rows), chunk):
            part = rows[a:b]
            image_tokens = model.encode_image(np.stack([p[0] for p in part]))
            ids = np.stack([p[1].ids for p in part])
            mask = np.stack([p[2] for p in part])
            logits = model.mam_head(model.decode((ids, mask), image_tokens)).data
            for i, (_, masked, _) in enumerate(part):
                predicted = logits[i, masked.mask_positions].argmax(axis=-1)
                correct += int((predicted == masked.labels).sum())
                total += masked.n_masked
    return correct / total


@dataclass
class EvalReport:
    metrics: dict
    result: RankingResult
    queries: QuerySet
    gallery: GalleryIndex
    wall_time: float

    def top_k_frame(self, k=10):
        rows = []
        k = min(k, self.result.order.shape[1])
        for q in range(len(self.queries)):
            row = dict(query=q, identity=int(self.queries.identities[q]), caption=self.queries.captions[q])
            for rank, g in enumerate(self.result.order[q, :k], start=1):
                row[f"top{rank}"] = int(g)
                row[f"top{rank}_id"] = int(self.gallery.identities[g])
                row[f"top{rank}_score"] = round(float(self.result.final[q, g]), 6)
            rows.append(row)
        return pd.DataFrame(rows)


def evaluate(model, records, vocab, lexicon=None, protocol="global", eta=32, max_len=24, workers=1):
    """
    Gallery = distinct test images, queries = test captions.

    :return EvalReport: Rank-1/5/10, mAP, decoder call count (and masked
        attribute accuracy when a lexicon is given).
    """
    if protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    start = time.perf_counter()
    gallery = build_gallery(model, records)
    queries = encode_queries(model, records, vocab, max_len)
    result = global_rank(queries, gallery)
    if protocol == "local":
        result = local_rerank(result, min(eta, len(gallery)), model, queries, gallery, workers=workers)
    metrics = dict(
        protocol=protocol,
        eta=result.eta,
        n_queries=len(queries),
        n_gallery=len(gallery),
        rank1=rank_k(result, 1),
        rank5=rank_k(result, 5),
        rank10=rank_k(result, 10),
        map=mean_ap(result),
        decoder_calls=result.decoder_calls,
    )
    if lexicon is not None:
        metrics["mam_accuracy"] = masked_attribute_accuracy(model, records, vocab, lexicon, max_len)
    wall = time.perf_counter() - start
    log.info(
        f"eval {protocol} (eta {result.eta}): R1 {metrics['rank1']:.4f} R5 {metrics['rank5']:.4f} "
        f"R10 {metrics['rank10']:.4f} mAP {metrics['map']:.4f} decoder calls {result.decoder_calls}"
    )
    return EvalReport(metrics, result, queries, gallery, wall)
