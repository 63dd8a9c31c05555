"""Shared fixtures: synthetic corpora, encoders, embedding helpers."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from playerreid.data import DatasetSplit, ImageRecord, load_manifest
from playerreid.embeddings import EmbeddingMatrix
from playerreid.encoders import reference_tiny_encoder
from playerreid.synth import SynthConfig, generate_corpus


def make_record(
    record_id: str,
    player_id: str,
    role: str,
    image_path: str = "img.png",
    height: int = 48,
    width: int = 24,
) -> ImageRecord:
    return ImageRecord(
        record_id=record_id,
        player_id=player_id,
        role=role,
        image_path=Path(image_path),
        height_px=height,
        width_px=width,
    )


def make_split(spec: dict[str, tuple[int, int]], name: str = "toy") -> DatasetSplit:
    """Build a split from {player_id: (n_query, n_gallery)}."""
    records = []
    for pid, (n_q, n_g) in spec.items():
        for i in range(n_q):
            records.append(make_record(f"{pid}-q{i}", pid, "query"))
        for i in range(n_g):
            records.append(make_record(f"{pid}-g{i}", pid, "gallery"))
    return DatasetSplit(name=name, records=tuple(records))


def unit_rows(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    vectors = rng.standard_normal((n, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def random_embeddings(
    n: int,
    dim: int,
    rng: np.random.Generator,
    prefix: str = "r",
    n_players: int | None = None,
) -> EmbeddingMatrix:
    pids = [f"p{rng.integers(0, n_players if n_players else max(2, n // 2))}" for _ in range(n)]
    return EmbeddingMatrix(
        ids=[f"{prefix}{i}" for i in range(n)],
        vectors=unit_rows(n, dim, rng).astype(np.float32),
        pids=pids,
    )


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(out, SynthConfig(n_players=24, gallery_per_player=4, seed=5))
    return out


@pytest.fixture(scope="session")
def train_split(corpus_dir):
    return load_manifest(corpus_dir / "train.csv")


@pytest.fixture(scope="session")
def test_split(corpus_dir):
    return load_manifest(corpus_dir / "test.csv")


@pytest.fixture
def tiny():
    return reference_tiny_encoder(seed=0)
