"""Cosine-similarity ranking quality (nDCG with binary relevance)."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


def cosine_similarity_matrix(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm feature vector at row(s) {np.flatnonzero(norms == 0).tolist()}")
    xn = x / norms[:, None]
    sim = np.clip(xn @ xn.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return sim


def dcg(relevance: Sequence[float]) -> float:
    rel = np.asarray(relevance, dtype=np.float64)
    return float(np.sum(rel / np.log2(np.arange(2, rel.size + 2))))


def query_ndcg(similarities: np.ndarray, relevant: np.ndarray, song_ids: Sequence[str]) -> float:
    """nDCG of one query over the full ranking of its candidates.

    Candidates are sorted by descending similarity, ties by ascending song id.
    """
    order = sorted(range(len(similarities)), key=lambda i: (-similarities[i], song_ids[i]))
    rel = np.asarray(relevant, dtype=np.float64)[order]
    n_rel = int(rel.sum())
    ideal = dcg(np.ones(n_rel))
    return dcg(rel) / ideal


def mean_ndcg(features: np.ndarray, labels: Sequence[str], song_ids: Sequence[str] | None = None) -> float:
    """Mean over queries of nDCG when ranking every other item by cosine similarity."""
    labels = np.asarray(labels)
    n = len(labels)
    if song_ids is None:
        song_ids = [f"{i:08d}" for i in range(n)]
    sim = cosine_similarity_matrix(features)
    scores = []
    for q in range(n):
        others = np.array([i for i in range(n) if i != q])
        relevant = labels[others] == labels[q]
        if not relevant.any():
            log.warning("query %s has no other item labelled %r; skipped", song_ids[q], labels[q])
            continue
        scores.append(query_ndcg(sim[q, others], relevant, [song_ids[i] for i in others]))
    if not scores:
        raise ValueError("no query has a same-label partner")
    return float(np.mean(scores))
