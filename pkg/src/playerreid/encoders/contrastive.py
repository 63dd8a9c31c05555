"""Contrastive vision transformer towers and their paired text tower.

Module and parameter names follow the published checkpoint layout, so a
cached state dict loads directly (vision keys under the `visual.` prefix).
The retrieval embedding is the final class-token representation after the
last normalization; the projection into the joint image-text space is applied
only when the tower is loaded with the projection enabled.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..errors import JointSpaceError
from ..preprocess import CONTRASTIVE_MEAN, CONTRASTIVE_STD
from .base import (
    FAMILY_CONTRASTIVE,
    LR_FAMILY_TRANSFORMER,
    TextEmbeddingProvider,
    VisionEncoder,
)
from .tokenizer import BpeTokenizer


@dataclass(frozen=True)
class TowerShape:
    """Architecture hyperparameters of one vision+text tower pair."""

    input_side: int
    patch_size: int
    vision_width: int
    vision_layers: int
    vision_heads: int
    joint_dim: int
    text_width: int
    text_layers: int
    text_heads: int
    vocab_size: int = 49408
    context_length: int = 77

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_size


TOWER_SHAPES: dict[str, TowerShape] = {
    "clip-vit-b16": TowerShape(
        input_side=224, patch_size=16, vision_width=768, vision_layers=12,
        vision_heads=12, joint_dim=512, text_width=512, text_layers=12, text_heads=8,
    ),
    "clip-vit-l14": TowerShape(
        input_side=224, patch_size=14, vision_width=1024, vision_layers=24,
        vision_heads=16, joint_dim=768, text_width=768, text_layers=12, text_heads=12,
    ),
}


class QuickGELU(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(1.702 * x)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, attn_mask: torch.Tensor | None = None):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads)
        self.ln_1 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            OrderedDict(
                [
                    ("c_fc", nn.Linear(width, width * 4)),
                    ("gelu", QuickGELU()),
                    ("c_proj", nn.Linear(width * 4, width)),
                ]
            )
        )
        self.ln_2 = nn.LayerNorm(width)
        self.attn_mask = attn_mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn_mask = None
        if self.attn_mask is not None:
            attn_mask = self.attn_mask[: x.shape[0], : x.shape[0]].to(dtype=x.dtype, device=x.device)
        y = self.ln_1(x)
        x = x + self.attn(y, y, y, need_weights=False, attn_mask=attn_mask)[0]
        x = x + self.mlp(self.ln_2(x))
        return x


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, attn_mask: torch.Tensor | None = None):
        super().__init__()
        self.resblocks = nn.Sequential(
            *[ResidualAttentionBlock(width, heads, attn_mask) for _ in range(layers)]
        )

    def forward(self, x: torch.Tensor, stop_after: int | None = None) -> torch.Tensor:
        for i, block in enumerate(self.resblocks):
            x = block(x)
            if stop_after is not None and i == stop_after:
                break
        return x


class ContrastiveViT(VisionEncoder):
    """Vision transformer tower with pre/post norms and optional projection."""

    family = FAMILY_CONTRASTIVE
    lr_family = LR_FAMILY_TRANSFORMER
    channel_mean = CONTRASTIVE_MEAN
    channel_std = CONTRASTIVE_STD

    def __init__(self, name: str, shape: TowerShape, drop_projection: bool = True):
        super().__init__()
        self.name = name
        self.shape = shape
        self.input_side = shape.input_side
        self.drop_projection = drop_projection
        self.embedding_dim = shape.vision_width if drop_projection else shape.joint_dim

        width = shape.vision_width
        scale = width**-0.5
        self.conv1 = nn.Conv2d(3, width, kernel_size=shape.patch_size,
                               stride=shape.patch_size, bias=False)
        self.class_embedding = nn.Parameter(scale * torch.randn(width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(shape.grid**2 + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(width, shape.vision_layers, shape.vision_heads)
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(scale * torch.randn(width, shape.joint_dim))
        if drop_projection:
            self.proj.requires_grad_(False)

    def _tokens(self, pixels: torch.Tensor, stop_after: int | None = None) -> torch.Tensor:
        x = self.conv1(pixels)  # (B, W, grid, grid)
        x = x.reshape(x.shape[0], x.shape[1], -1).permute(0, 2, 1)  # (B, grid^2, W)
        cls = self.class_embedding.to(x.dtype) + torch.zeros(
            x.shape[0], 1, x.shape[-1], dtype=x.dtype, device=x.device
        )
        x = torch.cat([cls, x], dim=1)
        x = x + self.positional_embedding.to(x.dtype)
        x = self.ln_pre(x)
        x = x.permute(1, 0, 2)  # (L, B, W)
        x = self.transformer(x, stop_after=stop_after)
        return x.permute(1, 0, 2)  # (B, L, W)

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        self.check_input(pixels)
        tokens = self._tokens(pixels)
        pooled = self.ln_post(tokens[:, 0, :])
        if self.drop_projection:
            return pooled
        return pooled @ self.proj

    def layer_tags(self) -> list[str]:
        return [f"block{i}" for i in range(self.shape.vision_layers)]

    def _activation_grid(self, pixels: torch.Tensor, layer_tag: str) -> torch.Tensor:
        self.check_input(pixels)
        index = int(layer_tag.removeprefix("block"))
        tokens = self._tokens(pixels, stop_after=index)
        patch_tokens = tokens[0, 1:, :]  # class token excluded
        grid = self.shape.grid
        return patch_tokens.reshape(grid, grid, -1).permute(2, 0, 1)

    def load_tower_state(self, state_dict: dict) -> None:
        """Load vision weights given a `visual.`-prefixed or bare state dict."""
        visual = {
            k.removeprefix("visual."): v for k, v in state_dict.items() if k.startswith("visual.")
        }
        if not visual:  # bare vision-tower layout
            visual = {k: v for k, v in state_dict.items() if k != "logit_scale"}
        self.load_state_dict(visual, strict=True)
        if "logit_scale" in state_dict:
            self.pretrained_logit_scale = float(torch.exp(state_dict["logit_scale"]).item())


class ContrastiveTextTower(nn.Module):
    """Causal text transformer projecting prompts into the joint space."""

    def __init__(self, shape: TowerShape):
        super().__init__()
        self.shape = shape
        mask = torch.full((shape.context_length, shape.context_length), float("-inf"))
        mask.triu_(1)
        self.token_embedding = nn.Embedding(shape.vocab_size, shape.text_width)
        self.positional_embedding = nn.Parameter(
            torch.empty(shape.context_length, shape.text_width).normal_(std=0.01)
        )
        self.transformer = Transformer(shape.text_width, shape.text_layers,
                                       shape.text_heads, attn_mask=mask)
        self.ln_final = nn.LayerNorm(shape.text_width)
        self.text_projection = nn.Parameter(
            torch.empty(shape.text_width, shape.joint_dim).normal_(std=shape.text_width**-0.5)
        )

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.token_embedding(token_ids) + self.positional_embedding
        x = x.permute(1, 0, 2)
        x = self.transformer(x)
        x = x.permute(1, 0, 2)
        x = self.ln_final(x)
        # features at the end-of-text position (highest token id in each row)
        eot = token_ids.argmax(dim=-1)
        return x[torch.arange(x.shape[0]), eot] @ self.text_projection

    def load_tower_state(self, state_dict: dict) -> None:
        text = {
            k: v
            for k, v in state_dict.items()
            if k.startswith(("transformer.", "token_embedding.", "ln_final."))
            or k in ("positional_embedding", "text_projection")
        }
        self.load_state_dict(text, strict=True)


class ContrastiveTextProvider(TextEmbeddingProvider):
    """Prompt embedder backed by the paired text tower and BPE tokenizer."""

    def __init__(self, tower: ContrastiveTextTower, tokenizer: BpeTokenizer):
        if tokenizer.vocab_size != tower.shape.vocab_size:
            raise JointSpaceError(
                f"tokenizer vocabulary ({tokenizer.vocab_size}) does not match the "
                f"text tower ({tower.shape.vocab_size})"
            )
        self.tower = tower.eval()
        self.tokenizer = tokenizer
        self.joint_dim = tower.shape.joint_dim

    @torch.no_grad()
    def embed(self, text: str) -> np.ndarray:
        row = self.tokenizer.tokenize(text, self.tower.shape.context_length).unsqueeze(0)
        vec = self.tower(row)[0]
        vec = vec / vec.norm()
        return vec.cpu().numpy().astype(np.float32)
