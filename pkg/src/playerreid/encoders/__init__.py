"""Encoder abstraction: pretrained towers, the reference encoder, registries."""

from .base import (
    FAMILY_CLASSIFICATION,
    FAMILY_CONTRASTIVE,
    FAMILY_REFERENCE,
    HashTextProvider,
    TextEmbeddingProvider,
    VisionEncoder,
    activation_maps,
    encode_normalized,
)
from .contrastive import ContrastiveTextProvider, ContrastiveTextTower, ContrastiveViT
from .registry import (
    EncoderInfo,
    available_encoders,
    build_encoder,
    checkpoint_header,
    encoder_info,
    load_checkpoint,
    load_pretrained,
    save_checkpoint,
    text_provider_for,
    weights_dir,
)
from .tiny import TinyConvEncoder, reference_tiny_encoder

__all__ = [
    "FAMILY_CLASSIFICATION",
    "FAMILY_CONTRASTIVE",
    "FAMILY_REFERENCE",
    "ContrastiveTextProvider",
    "ContrastiveTextTower",
    "ContrastiveViT",
    "EncoderInfo",
    "HashTextProvider",
    "TextEmbeddingProvider",
    "TinyConvEncoder",
    "VisionEncoder",
    "activation_maps",
    "available_encoders",
    "build_encoder",
    "checkpoint_header",
    "encode_normalized",
    "encoder_info",
    "load_checkpoint",
    "load_pretrained",
    "reference_tiny_encoder",
    "save_checkpoint",
    "text_provider_for",
    "weights_dir",
]
