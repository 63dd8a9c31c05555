"""Image preparation: aspect-preserving zero-padding, bilinear resize,
horizontal-flip augmentation and per-channel standardization.

All operations are pure; pixel grids are H x W x 3 float arrays in [0, 1]
until `normalize`, which produces standardized values for the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError

# Channel statistics matching the encoder families' pre-training.
CONTRASTIVE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CONTRASTIVE_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
REFERENCE_MEAN = (0.5, 0.5, 0.5)
REFERENCE_STD = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class PixelImage:
    """An H x W x 3 grid of reals in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ConfigError(f"PixelImage expects HxWx3 data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ConfigError(f"PixelImage needs positive height and width, got {arr.shape[:2]}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ConfigError(
                f"PixelImage values must lie in [0, 1], got range "
                f"[{arr.min():.4f}, {arr.max():.4f}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PreprocessConfig:
    """Target geometry and channel statistics for one encoder."""

    target_size: int
    channel_mean: tuple[float, float, float] = REFERENCE_MEAN
    channel_std: tuple[float, float, float] = REFERENCE_STD
    flip_probability: float = 0.5

    def __post_init__(self):
        if self.target_size < 1:
            raise ConfigError(f"target_size must be >= 1, got {self.target_size}")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std must each have 3 components")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError(f"channel_std components must be strictly positive, got {self.channel_std}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")


def load_image(path: str | Path) -> PixelImage:
    """Decode an 8-bit image file to a [0, 1] RGB pixel grid."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return PixelImage(arr)


def zero_pad_to_square(img: PixelImage) -> PixelImage:
    """Pad to S x S with S = max(H, W); content centered, padding exactly 0.

    Odd padding splits floor/ceil with the smaller pad first (top/left), so a
    209x100 crop gets left pad 54 and right pad 55.
    """
    h, w = img.height, img.width
    side = max(h, w)
    if h == side and w == side:
        return img
    out = np.zeros((side, side, 3), dtype=img.data.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top : top + h, left : left + w, :] = img.data
    return PixelImage(out)


def resize_bilinear(img: PixelImage, side: int) -> PixelImage:
    """Resample to side x side with bilinear interpolation (half-pixel centers)."""
    if side < 1:
        raise ConfigError(f"resize side must be >= 1, got {side}")
    if img.height == side and img.width == side:
        return img
    tensor = torch.from_numpy(img.data).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(tensor, size=(side, side), mode="bilinear", align_corners=False)
    out = resized.squeeze(0).permute(1, 2, 0).numpy()
    # interpolation of values in [0,1] stays in [0,1] up to float rounding
    return PixelImage(np.clip(out, 0.0, 1.0))


def horizontal_flip(img: PixelImage, p: float, rng: np.random.Generator) -> PixelImage:
    """Reverse columns with probability p; an involution at p = 1."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability must lie in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        return PixelImage(img.data[:, ::-1, :].copy())
    return img


def normalize(img: PixelImage, cfg: PreprocessConfig) -> np.ndarray:
    """Per-channel standardization: out[c] = (in[c] - mean[c]) / std[c]."""
    mean = np.asarray(cfg.channel_mean, dtype=np.float64)
    std = np.asarray(cfg.channel_std, dtype=np.float64)
    return (img.data - mean) / std


@dataclass(frozen=True)
class Preprocessor:
    """Full pipeline: pad to square, resize, optional flip, standardize.

    Output is a (3, S, S) float32 tensor ready for an encoder. The evaluation
    path (train=False) is deterministic; augmentation randomness comes only
    from the rng handed in by the caller.
    """

    config: PreprocessConfig

    def prepare(
        self,
        img: PixelImage,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> torch.Tensor:
        padded = zero_pad_to_square(img)
        resized = resize_bilinear(padded, self.config.target_size)
        if train and self.config.flip_probability > 0.0:
            if rng is None:
                raise ConfigError("training-mode preprocessing needs an explicit rng")
            resized = horizontal_flip(resized, self.config.flip_probability, rng)
        standardized = normalize(resized, self.config)
        return torch.from_numpy(np.ascontiguousarray(standardized.transpose(2, 0, 1))).float()

    def prepare_batch(
        self,
        images: list[PixelImage],
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> torch.Tensor:
        return torch.stack([self.prepare(img, train=train, rng=rng) for img in images])
