"""Encoder registry: named construction, weight resolution, checkpoints.

Pretrained weights live in a cache directory (env ``PLAYERREID_WEIGHTS_DIR``,
default ``~/.cache/playerreid``). Contrastive towers load a torch state dict
``<name>.pt`` from that cache, optionally verified against ``<name>.sha256``;
the paired text tower additionally needs the BPE vocabulary
``bpe_simple_vocab_16e6.txt.gz``. Classification backbones resolve through
torchvision's own cache. The reference encoder needs no weights at all.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from ..errors import CheckpointError, JointSpaceError, RegistryError, WeightsUnavailableError
from .backbones import _BACKBONES, ClassificationBackbone
from .base import (
    FAMILY_CLASSIFICATION,
    FAMILY_CONTRASTIVE,
    FAMILY_REFERENCE,
    HashTextProvider,
    TextEmbeddingProvider,
    VisionEncoder,
)
from .contrastive import (
    TOWER_SHAPES,
    ContrastiveTextProvider,
    ContrastiveTextTower,
    ContrastiveViT,
)
from .tiny import reference_tiny_encoder

WEIGHTS_DIR_ENV = "PLAYERREID_WEIGHTS_DIR"
VOCAB_FILENAME = "bpe_simple_vocab_16e6.txt.gz"


@dataclass(frozen=True)
class EncoderInfo:
    name: str
    family: str
    input_side: int
    embedding_dim: int  # with the projection dropped, where one exists
    joint_dim: int | None  # projected dimension shared with the text tower


def _registry() -> dict[str, EncoderInfo]:
    entries = {
        "tiny": EncoderInfo("tiny", FAMILY_REFERENCE, 32, 32, None),
    }
    for name, shape in TOWER_SHAPES.items():
        entries[name] = EncoderInfo(
            name, FAMILY_CONTRASTIVE, shape.input_side, shape.vision_width, shape.joint_dim
        )
    for name, (_, _, dim, _) in _BACKBONES.items():
        entries[name] = EncoderInfo(name, FAMILY_CLASSIFICATION, 224, dim, None)
    return entries


REGISTRY = _registry()


def available_encoders() -> list[str]:
    return sorted(REGISTRY)


def encoder_info(name: str) -> EncoderInfo:
    try:
        return REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown encoder {name!r}; known encoders: {', '.join(available_encoders())}"
        ) from None


def weights_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_DIR_ENV, Path.home() / ".cache" / "playerreid"))


def _verify_checksum(payload_path: Path) -> None:
    checksum_path = payload_path.with_suffix(".sha256")
    if not checksum_path.is_file():
        return
    expected = checksum_path.read_text(encoding="utf-8").split()[0].strip()
    actual = hashlib.sha256(payload_path.read_bytes()).hexdigest()
    if actual != expected:
        raise WeightsUnavailableError(
            f"checksum mismatch for {payload_path}: expected {expected}, got {actual}"
        )


def build_encoder(name: str, drop_projection: bool = True, seed: int = 0) -> VisionEncoder:
    """Construct an encoder without pretrained weights (random initialization).

    Useful for shape tests and for rebuilding a tower before loading one of
    our own checkpoints. `seed` only affects the reference encoder.
    """
    info = encoder_info(name)
    if info.family == FAMILY_REFERENCE:
        return reference_tiny_encoder(seed=seed)
    if info.family == FAMILY_CONTRASTIVE:
        return ContrastiveViT(name, TOWER_SHAPES[name], drop_projection=drop_projection)
    return ClassificationBackbone(name, pretrained=False)


def load_pretrained(name: str, drop_projection: bool = True) -> VisionEncoder:
    """Load a registered encoder with its pretrained weights.

    For contrastive towers `drop_projection` selects the pre-projection width
    (768 / 1024) used for re-identification fine-tuning; with the projection
    enabled the tower embeds into the joint image-text space instead.
    """
    info = encoder_info(name)
    if info.family == FAMILY_REFERENCE:
        return reference_tiny_encoder(seed=0)
    if info.family == FAMILY_CLASSIFICATION:
        return ClassificationBackbone(name, pretrained=True)

    payload = weights_dir() / f"{name}.pt"
    if not payload.is_file():
        raise WeightsUnavailableError(
            f"weights for {name!r} not found at {payload}; place the state dict there "
            f"(or set {WEIGHTS_DIR_ENV}) to use this tower offline"
        )
    _verify_checksum(payload)
    state = torch.load(payload, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    encoder = ContrastiveViT(name, TOWER_SHAPES[name], drop_projection=drop_projection)
    try:
        encoder.load_tower_state(state)
    except RuntimeError as exc:
        raise WeightsUnavailableError(f"state dict at {payload} does not fit {name!r}: {exc}") from None
    encoder.eval()
    return encoder


def text_provider_for(encoder: VisionEncoder) -> TextEmbeddingProvider:
    """Return the prompt embedder paired with an un-fine-tuned tower.

    Fine-tuned towers are refused: after contrastive re-identification
    training the vision embedding no longer matches the text encoder's space.
    The reference encoder gets a deterministic hash provider so offline runs
    can exercise the full prompt-classification plumbing.
    """
    if encoder.fine_tuned:
        raise JointSpaceError(
            f"encoder {encoder.name!r} was fine-tuned (step {encoder.training_step}); "
            "text-prompt classification is no longer possible with it"
        )
    info = encoder_info(encoder.name)
    if info.family == FAMILY_REFERENCE:
        return HashTextProvider(joint_dim=encoder.embedding_dim)
    if info.family != FAMILY_CONTRASTIVE:
        raise JointSpaceError(
            f"encoder {encoder.name!r} has no paired text model (family {info.family!r})"
        )
    if encoder.drop_projection:
        raise JointSpaceError(
            f"encoder {encoder.name!r} was loaded with the projection dropped; reload it "
            "with drop_projection=False to embed into the joint image-text space"
        )
    vocab = weights_dir() / VOCAB_FILENAME
    if not vocab.is_file():
        raise WeightsUnavailableError(f"BPE vocabulary not found at {vocab}")
    payload = weights_dir() / f"{encoder.name}.pt"
    if not payload.is_file():
        raise WeightsUnavailableError(f"weights for {encoder.name!r} not found at {payload}")
    state = torch.load(payload, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    from .tokenizer import BpeTokenizer

    tower = ContrastiveTextTower(TOWER_SHAPES[encoder.name])
    tower.load_tower_state(state)
    return ContrastiveTextProvider(tower, BpeTokenizer(vocab))


def checkpoint_header(encoder: VisionEncoder) -> dict:
    return {
        "name": encoder.name,
        "embedding_dim": encoder.embedding_dim,
        "input_side": encoder.input_side,
        "drop_projection": encoder.drop_projection,
        "training_step": encoder.training_step,
    }


def save_checkpoint(
    encoder: VisionEncoder,
    path: str | Path,
    extra: dict | None = None,
) -> Path:
    """Write serialized weights plus a JSON header sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = checkpoint_header(encoder)
    if extra:
        header["extra"] = extra
    torch.save({"header": header, "state_dict": encoder.state_dict()}, path)
    path.with_name(path.name + ".json").write_text(
        json.dumps(header, indent=2), encoding="utf-8"
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[VisionEncoder, dict]:
    """Rebuild an encoder from a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or "header" not in blob or "state_dict" not in blob:
        raise CheckpointError(f"checkpoint {path} lacks header/state_dict")
    header = blob["header"]
    encoder = build_encoder(header["name"], drop_projection=header.get("drop_projection", True))
    try:
        encoder.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not fit encoder {header['name']!r}: {exc}") from None
    encoder.training_step = int(header.get("training_step", 0))
    encoder.eval()
    return encoder, header
