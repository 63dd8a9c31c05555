"""Retrieval metrics: query-gallery distances, average precision, CMC.

Rankings sort distances ascending with ties broken by gallery index (stable
sort), so results are deterministic. Queries without any relevant gallery
item are excluded from mAP and CMC and counted in the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingMatrix
from .errors import EvaluationError


@dataclass
class DistanceMatrix:
    values: np.ndarray  # Q x G
    query_ids: list[str]
    gallery_ids: list[str]
    query_pids: list[str]
    gallery_pids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise EvaluationError(f"distance matrix must be 2-D, got shape {self.values.shape}")
        q, g = self.values.shape
        if len(self.query_ids) != q or len(self.query_pids) != q:
            raise EvaluationError(f"{q} query rows but {len(self.query_ids)} ids / {len(self.query_pids)} pids")
        if len(self.gallery_ids) != g or len(self.gallery_pids) != g:
            raise EvaluationError(f"{g} gallery columns but {len(self.gallery_ids)} ids / {len(self.gallery_pids)} pids")
        if not np.isfinite(self.values).all():
            raise EvaluationError("distance matrix contains non-finite values")

    @property
    def n_queries(self) -> int:
        return self.values.shape[0]

    @property
    def n_gallery(self) -> int:
        return self.values.shape[1]


def cosine_distance_matrix(query: EmbeddingMatrix, gallery: EmbeddingMatrix) -> DistanceMatrix:
    """d[i, j] = 1 - <q_i, g_j> over unit-norm rows; values lie in [0, 2]."""
    if query.dim != gallery.dim:
        raise EvaluationError(
            f"query dimension {query.dim} does not match gallery dimension {gallery.dim}"
        )
    query.require_unit_norm()
    gallery.require_unit_norm()
    qv = query.vectors.astype(np.float64)
    gv = gallery.vectors.astype(np.float64)
    values = np.clip(1.0 - qv @ gv.T, 0.0, 2.0)
    return DistanceMatrix(
        values=values,
        query_ids=list(query.ids),
        gallery_ids=list(gallery.ids),
        query_pids=list(query.require_pids()),
        gallery_pids=list(gallery.require_pids()),
    )


def average_precision(
    dist_row: np.ndarray, gallery_pids: list[str] | np.ndarray, query_pid: str
) -> float:
    """Mean of precision@rank over the ranks where relevant items land."""
    dist_row = np.asarray(dist_row, dtype=np.float64)
    pids = np.asarray(gallery_pids)
    if dist_row.shape[0] != pids.shape[0]:
        raise EvaluationError(f"{dist_row.shape[0]} distances for {pids.shape[0]} gallery pids")
    order = np.argsort(dist_row, kind="stable")
    relevant = pids[order] == query_pid
    if not relevant.any():
        raise EvaluationError(f"query player {query_pid!r} has no relevant gallery item")
    hit_ranks = np.nonzero(relevant)[0] + 1  # 1-based rank of each relevant item
    precision_at_hits = np.arange(1, hit_ranks.size + 1, dtype=np.float64) / hit_ranks
    return float(precision_at_hits.mean())


def _usable_queries(matrix: DistanceMatrix) -> list[int]:
    gallery_pids = np.asarray(matrix.gallery_pids)
    return [
        i for i, pid in enumerate(matrix.query_pids) if (gallery_pids == pid).any()
    ]


def per_query_average_precision(matrix: DistanceMatrix) -> tuple[list[float], int]:
    """AP for every usable query plus the count of excluded (matchless) queries."""
    usable = _usable_queries(matrix)
    if not usable:
        raise EvaluationError("no query has a relevant gallery item; nothing to evaluate")
    aps = [
        average_precision(matrix.values[i], matrix.gallery_pids, matrix.query_pids[i])
        for i in usable
    ]
    return aps, matrix.n_queries - len(usable)


def mean_average_precision(matrix: DistanceMatrix) -> float:
    aps, _ = per_query_average_precision(matrix)
    return float(np.mean(aps))


def cmc_rank_k(matrix: DistanceMatrix, k: int) -> float:
    """Fraction of (usable) queries with a correct match among the top k ranks."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    if k > matrix.n_gallery:
        raise EvaluationError(f"k={k} exceeds gallery size {matrix.n_gallery}")
    usable = _usable_queries(matrix)
    if not usable:
        raise EvaluationError("no query has a relevant gallery item; nothing to evaluate")
    gallery_pids = np.asarray(matrix.gallery_pids)
    hits = 0
    for i in usable:
        order = np.argsort(matrix.values[i], kind="stable")[:k]
        if (gallery_pids[order] == matrix.query_pids[i]).any():
            hits += 1
    return hits / len(usable)


@dataclass
class EvalReport:
    mean_ap: float
    cmc: dict[int, float]
    per_query_ap: list[float]
    reranked: bool
    rerank_params: dict | None = None
    n_queries: int = 0
    n_excluded: int = 0
    zero_shot: bool = False

    def __post_init__(self):
        ks = sorted(self.cmc)
        for a, b in zip(ks, ks[1:]):
            if self.cmc[b] < self.cmc[a] - 1e-12:
                raise EvaluationError(
                    f"CMC must be non-decreasing in k: cmc[{a}]={self.cmc[a]} > cmc[{b}]={self.cmc[b]}"
                )

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "per_query_ap": list(self.per_query_ap),
            "reranked": self.reranked,
            "rerank_params": self.rerank_params,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "zero_shot": self.zero_shot,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        return cls(
            mean_ap=payload["mean_ap"],
            cmc={int(k): v for k, v in payload["cmc"].items()},
            per_query_ap=list(payload["per_query_ap"]),
            reranked=payload["reranked"],
            rerank_params=payload.get("rerank_params"),
            n_queries=payload.get("n_queries", 0),
            n_excluded=payload.get("n_excluded", 0),
            zero_shot=payload.get("zero_shot", False),
        )


# JSON schema for a persisted evaluation outcome (raw + optional reranked).
EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["raw"],
    "properties": {
        "raw": {"$ref": "#/$defs/report"},
        "reranked": {"oneOf": [{"$ref": "#/$defs/report"}, {"type": "null"}]},
        "encoder_name": {"type": "string"},
        "checkpoint": {"type": "string"},
        "config_hash": {"type": "string"},
    },
    "$defs": {
        "report": {
            "type": "object",
            "required": ["mean_ap", "cmc", "per_query_ap", "reranked"],
            "properties": {
                "mean_ap": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                "cmc": {
                    "type": "object",
                    "additionalProperties": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                },
                "per_query_ap": {"type": "array", "items": {"type": "number"}},
                "reranked": {"type": "boolean"},
                "rerank_params": {"type": ["object", "null"]},
                "n_queries": {"type": "integer", "minimum": 0},
                "n_excluded": {"type": "integer", "minimum": 0},
                "zero_shot": {"type": "boolean"},
            },
        }
    },
}


@dataclass
class EvalOutcome:
    """Raw metrics plus, when requested, the re-ranked variant."""

    raw: EvalReport
    reranked: EvalReport | None = None
    encoder_name: str = ""
    checkpoint: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "raw": self.raw.to_dict(),
            "reranked": self.reranked.to_dict() if self.reranked else None,
            "encoder_name": self.encoder_name,
            "checkpoint": self.checkpoint,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalOutcome":
        return cls(
            raw=EvalReport.from_dict(payload["raw"]),
            reranked=EvalReport.from_dict(payload["reranked"]) if payload.get("reranked") else None,
            encoder_name=payload.get("encoder_name", ""),
            checkpoint=payload.get("checkpoint", ""),
            config_hash=payload.get("config_hash", ""),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalOutcome":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _report_from_matrix(
    matrix: DistanceMatrix,
    cmc_ks: tuple[int, ...],
    reranked: bool,
    rerank_params: dict | None,
    zero_shot: bool,
) -> EvalReport:
    aps, excluded = per_query_average_precision(matrix)
    cmc = {k: cmc_rank_k(matrix, k) for k in cmc_ks if k <= matrix.n_gallery}
    return EvalReport(
        mean_ap=float(np.mean(aps)),
        cmc=cmc,
        per_query_ap=aps,
        reranked=reranked,
        rerank_params=rerank_params,
        n_queries=matrix.n_queries,
        n_excluded=excluded,
        zero_shot=zero_shot,
    )


def evaluate(
    query: EmbeddingMatrix,
    gallery: EmbeddingMatrix,
    rerank: bool = True,
    k1: int = 20,
    k2: int = 6,
    lambda_value: float = 0.3,
    cmc_ks: tuple[int, ...] = (1, 5),
    zero_shot: bool = False,
) -> EvalOutcome:
    """Full retrieval evaluation: raw metrics and optional re-ranked metrics."""
    from .rerank import k_reciprocal_rerank

    raw_matrix = cosine_distance_matrix(query, gallery)
    raw_report = _report_from_matrix(raw_matrix, cmc_ks, False, None, zero_shot)
    reranked_report = None
    if rerank:
        params = {"k1": k1, "k2": k2, "lambda": lambda_value}
        reranked_matrix = k_reciprocal_rerank(query, gallery, k1=k1, k2=k2, lambda_value=lambda_value)
        reranked_report = _report_from_matrix(reranked_matrix, cmc_ks, True, params, zero_shot)
    return EvalOutcome(raw=raw_report, reranked=reranked_report)
