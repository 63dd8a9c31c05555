"""Embedding matrices and their on-disk cache format.

A cache is a flat little-endian float32 array (row-major N x D) next to a JSON
sidecar carrying ids, player ids, shape, provenance and a payload checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EvaluationError

UNIT_NORM_TOL = 1e-5


@dataclass
class EmbeddingMatrix:
    """N x D embedding rows keyed by record ids, unit-norm after encoding."""

    ids: list[str]
    vectors: np.ndarray
    pids: list[str] | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise EvaluationError(f"embedding matrix must be 2-D, got shape {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise EvaluationError(
                f"{len(self.ids)} ids for {self.vectors.shape[0]} embedding rows"
            )
        if self.pids is not None and len(self.pids) != len(self.ids):
            raise EvaluationError(f"{len(self.pids)} pids for {len(self.ids)} ids")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def require_unit_norm(self, tol: float = UNIT_NORM_TOL) -> None:
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        bad = np.abs(norms - 1.0) > tol
        if bad.any():
            raise EvaluationError(
                f"{int(bad.sum())} embedding row(s) are not unit-norm "
                f"(worst |norm-1| = {np.abs(norms - 1.0).max():.2e})"
            )

    def require_pids(self) -> list[str]:
        if self.pids is None:
            raise EvaluationError("embedding matrix has no player ids attached")
        return self.pids


def _payload_sha256(vectors: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vectors, dtype="<f4").tobytes()).hexdigest()


def save_embedding_cache(
    matrix: EmbeddingMatrix,
    path: str | Path,
    encoder_name: str = "",
    checkpoint: str = "",
    config_hash: str = "",
) -> Path:
    """Write `<path>` (raw float32 payload) and `<path>.json` (sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(matrix.vectors, dtype="<f4")
    path.write_bytes(payload.tobytes())
    sidecar = {
        "ids": list(matrix.ids),
        "pids": list(matrix.pids) if matrix.pids is not None else None,
        "shape": [int(matrix.n), int(matrix.dim)],
        "dtype": "<f4",
        "encoder_name": encoder_name,
        "checkpoint": checkpoint,
        "config_hash": config_hash,
        "payload_sha256": _payload_sha256(payload),
    }
    sidecar_path = path.with_name(path.name + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_embedding_cache(path: str | Path) -> tuple[EmbeddingMatrix, dict]:
    """Read a cache written by save_embedding_cache, verifying the checksum."""
    path = Path(path)
    sidecar_path = path.with_name(path.name + ".json")
    if not path.is_file():
        raise EvaluationError(f"embedding cache not found: {path}")
    if not sidecar_path.is_file():
        raise EvaluationError(f"embedding cache sidecar not found: {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"corrupt sidecar {sidecar_path}: {exc}") from None

    raw = path.read_bytes()
    n, dim = (int(x) for x in sidecar["shape"])
    expected_bytes = n * dim * 4
    if len(raw) != expected_bytes:
        raise EvaluationError(
            f"embedding cache {path}: payload is {len(raw)} bytes, sidecar shape "
            f"{n}x{dim} implies {expected_bytes}"
        )
    digest = hashlib.sha256(raw).hexdigest()
    if digest != sidecar.get("payload_sha256"):
        raise EvaluationError(f"embedding cache {path}: payload checksum mismatch")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    matrix = EmbeddingMatrix(ids=list(sidecar["ids"]), vectors=vectors, pids=sidecar.get("pids"))
    return matrix, sidecar
