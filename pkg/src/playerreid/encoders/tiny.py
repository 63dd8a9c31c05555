"""A small deterministic convolutional encoder used as an offline test double.

Three strided conv layers plus a linear head: ~26k parameters, 32x32 input,
32-d embeddings. Every conv layer is a tappable activation-map source.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..preprocess import REFERENCE_MEAN, REFERENCE_STD
from .base import FAMILY_REFERENCE, LR_FAMILY_CONVOLUTIONAL, VisionEncoder

_CHANNELS = (16, 32, 64)


class TinyConvEncoder(VisionEncoder):
    family = FAMILY_REFERENCE
    lr_family = LR_FAMILY_CONVOLUTIONAL
    input_side = 32
    embedding_dim = 32
    channel_mean = REFERENCE_MEAN
    channel_std = REFERENCE_STD

    def __init__(self, seed: int = 0):
        super().__init__()
        self.name = "tiny"
        self.seed = seed
        self.conv1 = nn.Conv2d(3, _CHANNELS[0], kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(_CHANNELS[0], _CHANNELS[1], kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(_CHANNELS[1], _CHANNELS[2], kernel_size=3, stride=2, padding=1)
        self.head = nn.Linear(_CHANNELS[2], self.embedding_dim)
        self._seeded_init(seed)

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in (self.conv1, self.conv2, self.conv3, self.head):
            weight = module.weight
            fan_in = weight.shape[1] * (
                weight.shape[2] * weight.shape[3] if weight.ndim == 4 else 1
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)

    def _features(self, pixels: torch.Tensor) -> dict[str, torch.Tensor]:
        a1 = F.relu(self.conv1(pixels))
        a2 = F.relu(self.conv2(a1))
        a3 = F.relu(self.conv3(a2))
        return {"conv1": a1, "conv2": a2, "conv3": a3}

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        self.check_input(pixels)
        a3 = self._features(pixels)["conv3"]
        pooled = a3.mean(dim=(2, 3))
        return self.head(pooled)

    def layer_tags(self) -> list[str]:
        return ["conv1", "conv2", "conv3"]

    def _activation_grid(self, pixels: torch.Tensor, layer_tag: str) -> torch.Tensor:
        self.check_input(pixels)
        return self._features(pixels)[layer_tag][0]


def reference_tiny_encoder(seed: int = 0) -> TinyConvEncoder:
    """Build the seeded reference encoder; same seed, same initial weights."""
    return TinyConvEncoder(seed=seed)
