"""Two-stage multi-query retrieval.

Stage 1 scores every enhanced sentence against the initial image pool and
keeps each sentence's top-K1 images; the union over all batches is the
candidate set (size m). Stage 2 re-scores the pooled sentences against the
candidates and lets each sentence vote for its top-min(K_final, m) images.

Ranking keys (ties always end on ascending image id):
  baseline         similarity desc
  enhanced_maxsim  max_sim desc, mean_sim desc
  enhanced_vote    votes desc, max_sim desc, mean_sim desc
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .embedding import EmbeddingProvider, EmbeddingStore, SimilarityMatrix, cosine_similarity, top_k_per_row
from .enhancer import EnhancedQuery, EnhancementError, passthrough
from .manifest import Mode, QueryRecord, RankedImage, RetrievalResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    n_initial: int = 1000
    k1: int = 15
    k_final: int = 10
    mode: Mode = Mode.ENHANCED_VOTE

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 1 <= self.k1 <= self.n_initial:
            raise ValueError(f"need 1 <= k1 <= n_initial, got k1={self.k1}, n_initial={self.n_initial}")
        if self.k_final < 1:
            raise ValueError("k_final must be >= 1")


@dataclass(frozen=True)
class ImageIndex:
    """The evaluation image pool: ids plus their unit vectors, row-aligned."""

    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids and vectors disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate image id in pool")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_store(cls, store: EmbeddingStore, image_ids: Optional[Sequence[str]] = None,
                   keys: Optional[Mapping[str, str]] = None) -> "ImageIndex":
        """Select ``image_ids`` (default: every stored id); ``keys`` maps image id -> store id."""
        ids = tuple(image_ids) if image_ids is not None else store.ids
        lookup = [keys.get(i, i) for i in ids] if keys else list(ids)
        return cls(ids, store.lookup(lookup))

    def subset(self, ids: Sequence[str]) -> "ImageIndex":
        pos = {k: i for i, k in enumerate(self.ids)}
        return ImageIndex(tuple(ids), self.vectors[[pos[i] for i in ids]])


@dataclass(frozen=True)
class CandidateSet:
    ids: tuple[str, ...]
    # image id -> (batch index, sentence index) pairs whose top-K1 included it
    provenance: Mapping[str, tuple[tuple[int, int], ...]]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class VoteTally:
    votes: int
    max_sim: float
    mean_sim: float


class _TextVectors:
    """Embeds each distinct text once per query."""

    def __init__(self, encoder: EmbeddingProvider, texts: Sequence[str]):
        unique = list(dict.fromkeys(texts))
        vecs = encoder.embed_texts(unique)
        self._pos = {t: i for i, t in enumerate(unique)}
        self._vecs = vecs

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return self._vecs[[self._pos[t] for t in texts]]


def stage1_filter(enhanced: EnhancedQuery, index: ImageIndex, encoder: EmbeddingProvider,
                  config: RetrievalConfig, *, _vectors: Optional[_TextVectors] = None) -> CandidateSet:
    if not enhanced.batches or not any(enhanced.batches):
        raise ValueError("enhanced query has no texts")
    if len(index) == 0:
        raise ValueError("empty image pool")
    vectors = _vectors or _TextVectors(encoder, enhanced.pooled or [t for b in enhanced.batches for t in b])
    order: dict[str, list[tuple[int, int]]] = {}
    for b, batch in enumerate(enhanced.batches):
        m_b = cosine_similarity(vectors(batch), index.vectors, rows=batch, cols=index.ids)
        for s, top in enumerate(top_k_per_row(m_b, config.k1)):
            for image_id in top:
                order.setdefault(image_id, []).append((b, s))
    return CandidateSet(tuple(order), {k: tuple(v) for k, v in order.items()})


def tally_votes(matrix: SimilarityMatrix, k: int) -> dict[str, VoteTally]:
    """Each row votes once for each of its top-k columns; every column gets a tally."""
    votes = dict.fromkeys(matrix.cols, 0)
    for top in top_k_per_row(matrix, k):
        for image_id in top:
            votes[image_id] += 1
    if matrix.values.shape[0]:
        maxes = matrix.values.max(axis=0)
        means = matrix.values.mean(axis=0)
    else:
        maxes = means = np.full(len(matrix.cols), -math.inf)
    return {c: VoteTally(votes[c], float(maxes[j]), float(means[j])) for j, c in enumerate(matrix.cols)}


def rank_by_votes(tally: Mapping[str, VoteTally]) -> list[str]:
    return sorted(tally, key=lambda i: (-tally[i].votes, -tally[i].max_sim, -tally[i].mean_sim, i))


def rank_by_maxsim(tally: Mapping[str, VoteTally]) -> list[str]:
    return sorted(tally, key=lambda i: (-tally[i].max_sim, -tally[i].mean_sim, i))


def final_matrix(enhanced: EnhancedQuery, candidates: CandidateSet, index: ImageIndex,
                 encoder: EmbeddingProvider, *, _vectors: Optional[_TextVectors] = None) -> SimilarityMatrix:
    """Pooled sentences x candidate images."""
    vectors = _vectors or _TextVectors(encoder, enhanced.pooled)
    sub = index.subset(candidates.ids)
    return cosine_similarity(vectors(enhanced.pooled), sub.vectors, rows=enhanced.pooled, cols=sub.ids)


def stage2_rank(enhanced: EnhancedQuery, candidates: CandidateSet, index: ImageIndex,
                encoder: EmbeddingProvider, config: RetrievalConfig, *, query_id: str = "",
                mode: Mode = Mode.ENHANCED_VOTE,
                _vectors: Optional[_TextVectors] = None) -> RetrievalResult:
    m = len(candidates)
    if m < 1:
        raise ValueError("stage 2 needs at least one candidate")
    matrix = final_matrix(enhanced, candidates, index, encoder, _vectors=_vectors)
    tally = tally_votes(matrix, min(config.k_final, m))
    if mode is Mode.ENHANCED_MAXSIM:
        order = rank_by_maxsim(tally)
        ranked = tuple(RankedImage(i, tally[i].max_sim) for i in order[: config.k_final])
    else:
        order = rank_by_votes(tally)
        ranked = tuple(RankedImage(i, tally[i].max_sim, tally[i].votes) for i in order[: config.k_final])
    return RetrievalResult(query_id, mode, ranked, m)


def initial_pool(query_vec: np.ndarray, index: ImageIndex, n_initial: int) -> ImageIndex:
    """Narrow a pool larger than ``n_initial`` to the query's top-n_initial images."""
    if len(index) <= n_initial:
        return index
    sims = cosine_similarity(query_vec[None, :], index.vectors, cols=index.ids)
    return index.subset(top_k_per_row(sims, n_initial)[0])


def _baseline(query_id: str, query_vec: np.ndarray, query_text: str, index: ImageIndex,
              config: RetrievalConfig, *, fallback: bool = False, mode: Mode = Mode.BASELINE) -> RetrievalResult:
    sims = cosine_similarity(query_vec[None, :], index.vectors, rows=[query_text], cols=index.ids)
    col = {c: j for j, c in enumerate(index.ids)}
    top = top_k_per_row(sims, config.k_final)[0]
    ranked = tuple(RankedImage(i, float(sims.values[0, col[i]])) for i in top)
    return RetrievalResult(query_id, mode, ranked, len(index), fallback=fallback)


Enhancer = Callable[[str], EnhancedQuery]


def retrieve(query: QueryRecord | str, index: ImageIndex, encoder: EmbeddingProvider,
             config: RetrievalConfig, enhancer: Optional[Enhancer] = None) -> RetrievalResult:
    """Run one query in ``config.mode`` over the image pool ``index``.

    ``enhancer`` maps a query string to an EnhancedQuery (default: passthrough).
    If it raises ``EnhancementError`` the baseline result is returned with
    ``fallback=True``; any other error propagates.
    """
    if isinstance(query, QueryRecord):
        query_id, text = query.id, query.text
    else:
        query_id, text = "", query
    query_vec = encoder.embed_texts([text])[0]
    pool = initial_pool(query_vec, index, config.n_initial)
    if config.mode is Mode.BASELINE:
        return _baseline(query_id, query_vec, text, pool, config)

    try:
        enhanced = (enhancer or passthrough)(text)
    except EnhancementError as exc:
        log.warning("enhancement failed for %s, falling back to baseline: %s", query_id or text, exc)
        return _baseline(query_id, query_vec, text, pool, config, fallback=True, mode=config.mode)

    vectors = _TextVectors(encoder, enhanced.pooled)
    candidates = stage1_filter(enhanced, pool, encoder, config, _vectors=vectors)
    return stage2_rank(enhanced, candidates, pool, encoder, config, query_id=query_id,
                       mode=config.mode, _vectors=vectors)


def brute_force_topk(query_vec: Sequence[float], image_vecs: Sequence[Sequence[float]],
                     image_ids: Sequence[str], k: int) -> list[str]:
    """Exhaustive cosine ranking in plain Python; the reference for equivalence tests."""
    q = [float(x) for x in query_vec]
    qn = math.sqrt(math.fsum(x * x for x in q))
    scored = []
    for image_id, vec in zip(image_ids, image_vecs):
        v = [float(x) for x in vec]
        dot = math.fsum(a * b for a, b in zip(q, v))
        vn = math.sqrt(math.fsum(x * x for x in v))
        scored.append((-(dot / (qn * vn)), image_id))
    scored.sort()
    return [image_id for _, image_id in scored[:k]]
