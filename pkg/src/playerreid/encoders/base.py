"""Uniform encoder interface: embeddings, activation-map taps, text providers."""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..embeddings import EmbeddingMatrix
from ..errors import RegistryError
from ..preprocess import PreprocessConfig

FAMILY_CONTRASTIVE = "contrastive"
FAMILY_CLASSIFICATION = "classification"
FAMILY_REFERENCE = "reference"

LR_FAMILY_TRANSFORMER = "transformer"
LR_FAMILY_CONVOLUTIONAL = "convolutional"


class VisionEncoder(nn.Module):
    """Base class for all vision towers.

    Subclasses set `name`, `input_side`, `embedding_dim`, `family`,
    `lr_family` and channel statistics, and implement `embed` plus the
    activation-map tap. `training_step` tracks fine-tuning; a tower with
    training_step > 0 has left the joint image-text space.
    """

    name: str = ""
    input_side: int = 0
    embedding_dim: int = 0
    family: str = FAMILY_REFERENCE
    lr_family: str = LR_FAMILY_CONVOLUTIONAL
    channel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    channel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    drop_projection: bool = True
    # learned similarity temperature carried by contrastive checkpoints, if any
    pretrained_logit_scale: float | None = None

    def __init__(self):
        super().__init__()
        self.training_step = 0

    @property
    def fine_tuned(self) -> bool:
        return self.training_step > 0

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        """Map a (B, 3, S, S) preprocessed batch to raw (B, D) embeddings."""
        raise NotImplementedError

    def layer_tags(self) -> list[str]:
        """Names of layers whose activation maps can be tapped."""
        raise NotImplementedError

    def _activation_grid(self, pixels: torch.Tensor, layer_tag: str) -> torch.Tensor:
        """Return (M, h, w) activation maps for a single (1, 3, S, S) input."""
        raise NotImplementedError

    def activation_grid(self, pixels: torch.Tensor, layer_tag: str) -> torch.Tensor:
        if layer_tag not in self.layer_tags():
            raise RegistryError(
                f"encoder {self.name!r} has no layer {layer_tag!r}; "
                f"valid tags: {', '.join(self.layer_tags())}"
            )
        if pixels.ndim == 3:
            pixels = pixels.unsqueeze(0)
        if pixels.shape[0] != 1:
            raise RegistryError("activation maps are extracted for a single image at a time")
        return self._activation_grid(pixels, layer_tag)

    def preprocess_config(self, flip_probability: float = 0.0) -> PreprocessConfig:
        return PreprocessConfig(
            target_size=self.input_side,
            channel_mean=self.channel_mean,
            channel_std=self.channel_std,
            flip_probability=flip_probability,
        )

    def check_input(self, pixels: torch.Tensor) -> None:
        if pixels.ndim != 4 or pixels.shape[1] != 3:
            raise RegistryError(f"expected (B, 3, S, S) input, got shape {tuple(pixels.shape)}")
        if pixels.shape[2] != self.input_side or pixels.shape[3] != self.input_side:
            raise RegistryError(
                f"encoder {self.name!r} expects {self.input_side}x{self.input_side} inputs, "
                f"got {pixels.shape[2]}x{pixels.shape[3]}"
            )

    def parameter_fingerprint(self) -> str:
        """Stable digest of all parameter values, for determinism checks."""
        h = hashlib.sha256()
        for key, value in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(value.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@torch.no_grad()
def encode_normalized(
    encoder: VisionEncoder,
    batch: torch.Tensor,
    ids: list[str],
    pids: list[str] | None = None,
    chunk: int = 64,
) -> EmbeddingMatrix:
    """Encode a preprocessed batch into unit-norm rows ordered like `ids`."""
    encoder.check_input(batch)
    if batch.shape[0] != len(ids):
        raise RegistryError(f"{batch.shape[0]} images for {len(ids)} ids")
    was_training = encoder.training
    encoder.eval()
    try:
        rows = []
        for start in range(0, batch.shape[0], chunk):
            raw = encoder.embed(batch[start : start + chunk])
            rows.append(F.normalize(raw, dim=1))
        vectors = torch.cat(rows, dim=0).cpu().numpy().astype(np.float32)
    finally:
        if was_training:
            encoder.train()
    return EmbeddingMatrix(ids=list(ids), vectors=vectors, pids=list(pids) if pids else None)


def activation_maps(encoder: VisionEncoder, pixels: torch.Tensor, layer_tag: str) -> np.ndarray:
    """Extract a layer's activation maps for one image as an (M, h, w) array."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            grid = encoder.activation_grid(pixels, layer_tag)
    finally:
        if was_training:
            encoder.train()
    return grid.cpu().numpy().astype(np.float64)


class TextEmbeddingProvider:
    """Maps a text prompt to a unit-norm vector in the joint image-text space."""

    joint_dim: int = 0

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_many(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


class HashTextProvider(TextEmbeddingProvider):
    """Deterministic pseudo text embeddings for offline runs and tests.

    Each prompt hashes to a seeded unit vector; there is no semantic content,
    only a stable, well-formed joint space of the requested dimension.
    """

    def __init__(self, joint_dim: int, seed: int = 0):
        self.joint_dim = joint_dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.joint_dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)
