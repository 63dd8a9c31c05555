"""k-reciprocal re-ranking of a query-gallery distance matrix.

Queries and gallery are pooled; each point gets a sparse encoding vector
supported on its (expanded) k-reciprocal neighbor set, weighted by
exp(-distance) and normalized to sum 1. After local query expansion (mean of
the k2 nearest encoding vectors), the Jaccard distance between query and
gallery encodings is blended with the original cosine distance:

    final = lambda * original + (1 - lambda) * jaccard

so lambda = 1 reproduces the original matrix exactly.
"""

from __future__ import annotations

import numpy as np

from .embeddings import EmbeddingMatrix
from .errors import EvaluationError
from .eval import DistanceMatrix


def _k_reciprocal_set(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    """Indices j within i's top-(k+1) whose own top-(k+1) contains i."""
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[(backward == i).any(axis=1)]


def _encoding_vectors(
    original: np.ndarray, initial_rank: np.ndarray, k1: int
) -> np.ndarray:
    """Sparse reciprocal-neighbor encodings, one row per pooled point."""
    m = original.shape[0]
    half_k = int(round(k1 / 2))
    encodings = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        members = _k_reciprocal_set(initial_rank, i, k1)
        member_set = set(members.tolist())
        expanded = set(member_set)
        for j in members:
            candidates = _k_reciprocal_set(initial_rank, int(j), half_k)
            overlap = sum(1 for c in candidates if int(c) in member_set)
            if overlap >= (2.0 / 3.0) * len(candidates):
                expanded.update(int(c) for c in candidates)
        idx = np.fromiter(sorted(expanded), dtype=np.int64)
        weights = np.exp(-original[i, idx])
        encodings[i, idx] = weights / weights.sum()
    return encodings


def k_reciprocal_rerank(
    query: EmbeddingMatrix,
    gallery: EmbeddingMatrix,
    k1: int = 20,
    k2: int = 6,
    lambda_value: float = 0.3,
    auto_clamp: bool = True,
) -> DistanceMatrix:
    """Re-rank query-gallery cosine distances via k-reciprocal encodings.

    With auto_clamp, k1 (and k2) shrink to fit small candidate pools; without
    it, k1 >= Q+G is an error. Memory grows as (Q+G)^2, which is fine at desk
    scale and workable for the full dataset.
    """
    if not 0.0 <= lambda_value <= 1.0:
        raise EvaluationError(f"lambda must lie in [0, 1], got {lambda_value}")
    if k2 < 1 or k1 <= k2:
        raise EvaluationError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if query.dim != gallery.dim:
        raise EvaluationError(
            f"query dimension {query.dim} does not match gallery dimension {gallery.dim}"
        )
    query.require_unit_norm()
    gallery.require_unit_norm()

    n_query = query.n
    feats = np.vstack([query.vectors, gallery.vectors]).astype(np.float64)
    m = feats.shape[0]
    if k1 >= m:
        if not auto_clamp:
            raise EvaluationError(f"k1={k1} must be smaller than the candidate pool ({m})")
        k1 = m - 1
        k2 = min(k2, max(1, k1 - 1))

    original = np.clip(1.0 - feats @ feats.T, 0.0, 2.0)
    initial_rank = np.argsort(original, axis=1, kind="stable")

    encodings = _encoding_vectors(original, initial_rank, k1)
    if k2 > 1:  # local query expansion
        encodings = np.stack(
            [encodings[initial_rank[i, :k2]].mean(axis=0) for i in range(m)]
        )

    gallery_enc = encodings[n_query:]
    jaccard = np.empty((n_query, m - n_query), dtype=np.float64)
    for qi in range(n_query):
        minima = np.minimum(encodings[qi], gallery_enc).sum(axis=1)
        maxima = np.maximum(encodings[qi], gallery_enc).sum(axis=1)
        jaccard[qi] = 1.0 - minima / maxima

    final = lambda_value * original[:n_query, n_query:] + (1.0 - lambda_value) * jaccard
    return DistanceMatrix(
        values=final,
        query_ids=list(query.ids),
        gallery_ids=list(gallery.ids),
        query_pids=list(query.require_pids()),
        gallery_pids=list(gallery.require_pids()),
    )
