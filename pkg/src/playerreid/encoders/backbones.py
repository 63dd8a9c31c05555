"""Classification-pretrained backbones behind the encoder interface.

Backed by torchvision; the embedding is the representation immediately before
the classifier head. Pretrained weights resolve through torchvision's download
cache, so offline use without cached weights raises a clean error.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import WeightsUnavailableError
from ..preprocess import IMAGENET_MEAN, IMAGENET_STD
from .base import (
    FAMILY_CLASSIFICATION,
    LR_FAMILY_CONVOLUTIONAL,
    LR_FAMILY_TRANSFORMER,
    VisionEncoder,
)

_BACKBONES = {
    "vit-b16-imagenet": ("vit_b_16", "ViT_B_16_Weights", 768, LR_FAMILY_TRANSFORMER),
    "vit-l16-imagenet": ("vit_l_16", "ViT_L_16_Weights", 1024, LR_FAMILY_TRANSFORMER),
    "convnext-base-imagenet": ("convnext_base", "ConvNeXt_Base_Weights", 1024, LR_FAMILY_CONVOLUTIONAL),
    "convnext-large-imagenet": ("convnext_large", "ConvNeXt_Large_Weights", 1536, LR_FAMILY_CONVOLUTIONAL),
}


class ClassificationBackbone(VisionEncoder):
    family = FAMILY_CLASSIFICATION
    input_side = 224
    channel_mean = IMAGENET_MEAN
    channel_std = IMAGENET_STD

    def __init__(self, name: str, pretrained: bool = True):
        super().__init__()
        arch, weights_enum, dim, lr_family = _BACKBONES[name]
        self.name = name
        self.embedding_dim = dim
        self.lr_family = lr_family
        self._is_vit = arch.startswith("vit")

        try:
            import torchvision.models as tvm
        except ImportError as exc:
            raise WeightsUnavailableError(
                f"encoder {name!r} needs torchvision (install the 'backbones' extra)"
            ) from exc

        weights = getattr(tvm, weights_enum).DEFAULT if pretrained else None
        try:
            model = getattr(tvm, arch)(weights=weights)
        except Exception as exc:  # urllib errors surface as various types
            raise WeightsUnavailableError(
                f"could not resolve pretrained weights for {name!r} "
                f"(offline without a populated download cache?): {exc}"
            ) from exc

        # strip the classifier: embeddings are the features right before it
        if self._is_vit:
            model.heads = nn.Identity()
        else:
            model.classifier[2] = nn.Identity()
        self.model = model

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        self.check_input(pixels)
        return self.model(pixels)

    def layer_tags(self) -> list[str]:
        if self._is_vit:
            return [f"block{i}" for i in range(len(self.model.encoder.layers))]
        return [f"stage{i}" for i in range(len(self.model.features))]

    def _activation_grid(self, pixels: torch.Tensor, layer_tag: str) -> torch.Tensor:
        self.check_input(pixels)
        if self._is_vit:
            index = int(layer_tag.removeprefix("block"))
            x = self.model._process_input(pixels)
            cls = self.model.class_token.expand(x.shape[0], -1, -1)
            x = torch.cat([cls, x], dim=1)
            x = x + self.model.encoder.pos_embedding
            x = self.model.encoder.dropout(x)
            for i, layer in enumerate(self.model.encoder.layers):
                x = layer(x)
                if i == index:
                    break
            patch_tokens = x[0, 1:, :]
            grid = self.input_side // self.model.patch_size
            return patch_tokens.reshape(grid, grid, -1).permute(2, 0, 1)
        index = int(layer_tag.removeprefix("stage"))
        x = pixels
        for i, stage in enumerate(self.model.features):
            x = stage(x)
            if i == index:
                break
        return x[0]
