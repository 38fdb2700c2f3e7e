"""Embedding-based retrieval of stored preferences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .extraction import CandidatePreference
from .llm_gateway import EmbeddingVector, Gateway
from .prefstore import Preference, StoreSnapshot
from .taxonomy import CategoryTaxonomy

DEFAULT_K = 3


class EmbeddingMode(str, Enum):
    ENRICHED = "enriched"
    SENTENCE_ONLY = "sentence_only"


def enriched_text(
    detail_display_name: str,
    value: str,
    source_sentence: str,
    mode: EmbeddingMode = EmbeddingMode.ENRICHED,
) -> str:
    """Text that gets embedded for a stored preference.

    >>> enriched_text("Favorite Cuisine", "Italian", "Italian it is.")
    'favorite cuisine: Italian. Italian it is.'
    """
    if mode is EmbeddingMode.SENTENCE_ONLY:
        return source_sentence
    return f"{detail_display_name.lower()}: {value}. {source_sentence}"


def preference_text(taxonomy: CategoryTaxonomy, candidate: CandidatePreference | Preference, mode: EmbeddingMode = EmbeddingMode.ENRICHED) -> str:
    detail = taxonomy.detail(candidate.path)
    return enriched_text(detail.display_name, candidate.value, candidate.source_sentence, mode)


def embed_preference(
    gateway: Gateway,
    taxonomy: CategoryTaxonomy,
    candidate: CandidatePreference | Preference,
    mode: EmbeddingMode = EmbeddingMode.ENRICHED,
) -> EmbeddingVector:
    return gateway.embed(preference_text(taxonomy, candidate, mode))


def cosine(a: EmbeddingVector | Sequence[float], b: EmbeddingVector | Sequence[float]) -> float:
    va = a.array() if isinstance(a, EmbeddingVector) else np.asarray(a, dtype=np.float64)
    vb = b.array() if isinstance(b, EmbeddingVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    # Clamp rounding overshoot so scores stay in [-1, 1].
    return max(-1.0, min(1.0, float(np.dot(va, vb)) / (na * nb)))


@dataclass(frozen=True)
class DynamicN:
    """Resolve k as the user's preference count in one sub-category."""

    sub_category: str


@dataclass(frozen=True)
class RetrievalQuery:
    user_id: str
    utterance: str
    k: int | DynamicN = DEFAULT_K

    def __post_init__(self) -> None:
        if not self.utterance.strip():
            raise ValueError("utterance must be non-empty")
        if isinstance(self.k, int) and self.k <= 0:
            raise ValueError("k must be positive")


@dataclass(frozen=True)
class RankedPreference:
    preference: Preference
    score: float


def rank(
    query_vector: EmbeddingVector,
    candidates: Iterable[tuple[Preference, EmbeddingVector]],
) -> list[RankedPreference]:
    """Sort by cosine descending, ties by earlier created_at, then id."""
    scored = [RankedPreference(p, cosine(query_vector, vec)) for p, vec in candidates]
    scored.sort(key=lambda r: (-r.score, r.preference.created_at, r.preference.id))
    return scored


def resolve_k(k: int | DynamicN, snapshot: StoreSnapshot) -> int:
    if isinstance(k, DynamicN):
        return snapshot.count_by_subcategory(k.sub_category)
    return k


def retrieve(
    query: RetrievalQuery,
    snapshot: StoreSnapshot,
    gateway: Gateway,
    *,
    score_floor: float = -1.0,
    embeddings: Mapping[str, EmbeddingVector] | None = None,
) -> list[RankedPreference]:
    """Top-k stored preferences for an utterance.

    The utterance is embedded as-is. ``embeddings`` overrides the stored
    vectors by preference id (the evaluation uses it for sentence-only
    vectors). Scores below ``score_floor`` are dropped; the default of -1
    drops nothing.
    """
    if not snapshot.preferences:
        return []
    k = resolve_k(query.k, snapshot)
    if k <= 0:
        return []
    qvec = gateway.embed(query.utterance)
    pairs = [(p, embeddings[p.id] if embeddings else p.embedding) for p in snapshot.preferences]
    ranked = rank(qvec, pairs)
    return [r for r in ranked[:k] if r.score >= score_floor]


def topk_accuracy(
    results: Sequence[Sequence[str]],
    ground_truth: Sequence[str],
    ns: Sequence[int],
    offsets: Sequence[int] = (0, 1, 2),
) -> dict[int, float]:
    """Fraction of queries whose ground-truth id is within the top ``n + offset``.

    ``results[i]`` is the full ranked id list for query ``i``.
    """
    if not (len(results) == len(ground_truth) == len(ns)):
        raise ValueError("results, ground_truth and ns must align")
    if not results:
        return {o: math.nan for o in offsets}
    out = {}
    for off in offsets:
        hits = sum(1 for ids, gt, n in zip(results, ground_truth, ns) if gt in ids[: n + off])
        out[off] = hits / len(results)
    return out
