"""Score-weighted activation mapping over any tappable encoder layer.

The procedure: extract the layer's M activation maps for the image, min-max
normalize each and up-sample to the image size, multiply with the image to
form M masked copies, encode those in chunks and score each embedding with
the target function (cosine to a prompt embedding or to a reference image
embedding), softmax the scores into weights, and return the rectified
weighted sum of the normalized maps, min-max normalized to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import JERSEY_NUMBER_MAX, JERSEY_NUMBER_MIN
from .encoders import TextEmbeddingProvider, VisionEncoder, activation_maps, encode_normalized
from .errors import ConfigError, EvaluationError, JointSpaceError
from .preprocess import PixelImage, Preprocessor
from .zeroshot import LOCALISATION_TEMPLATE


@dataclass(frozen=True)
class ScoreCamConfig:
    layer_tag: str
    batch_chunk: int = 8
    baseline: str = "none"  # or "zero_image": subtract the black-image score

    def __post_init__(self):
        if self.batch_chunk < 1:
            raise ConfigError(f"batch_chunk must be >= 1, got {self.batch_chunk}")
        if self.baseline not in ("none", "zero_image"):
            raise ConfigError(f"baseline must be 'none' or 'zero_image', got {self.baseline!r}")


@dataclass
class CamMap:
    values: np.ndarray  # H x W in [0, 1]
    source_layer: str
    target_descriptor: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise EvaluationError(f"CamMap must be 2-D, got shape {self.values.shape}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise EvaluationError(
                f"CamMap values outside [0, 1]: range "
                f"[{self.values.min():.4f}, {self.values.max():.4f}]"
            )


def _minmax(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; constants map to all-ones if positive, else all-zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        return (values - lo) / (hi - lo)
    if hi > 0.0:
        return np.ones_like(values)
    return np.zeros_like(values)


def _upsample(map_2d: np.ndarray, height: int, width: int) -> np.ndarray:
    tensor = torch.from_numpy(np.ascontiguousarray(map_2d, dtype=np.float64))
    tensor = tensor.unsqueeze(0).unsqueeze(0)
    out = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def _embed_images(
    encoder: VisionEncoder,
    images: list[PixelImage],
    preprocessor: Preprocessor,
    chunk: int,
) -> np.ndarray:
    rows = []
    for start in range(0, len(images), chunk):
        pixels = preprocessor.prepare_batch(images[start : start + chunk], train=False)
        matrix = encode_normalized(
            encoder, pixels, ids=[str(i) for i in range(start, start + pixels.shape[0])]
        )
        rows.append(matrix.vectors)
    return np.vstack(rows).astype(np.float64)


def score_cam(
    encoder: VisionEncoder,
    image: PixelImage,
    target: Callable[[np.ndarray], float],
    cfg: ScoreCamConfig,
    preprocessor: Preprocessor | None = None,
    target_descriptor: str = "",
) -> CamMap:
    """Saliency map over `image` for an embedding-level scoring function."""
    if preprocessor is None:
        preprocessor = Preprocessor(encoder.preprocess_config(0.0))

    pixels = preprocessor.prepare(image, train=False).unsqueeze(0)
    maps = activation_maps(encoder, pixels, cfg.layer_tag)  # (M, h, w)
    if maps.shape[0] == 0:
        raise EvaluationError(f"layer {cfg.layer_tag!r} produced no activation maps")

    masks = np.stack(
        [_minmax(_upsample(m, image.height, image.width)) for m in maps]
    )  # (M, H, W) in [0, 1]
    masked_images = [PixelImage(image.data * mask[:, :, None]) for mask in masks]

    embeddings = _embed_images(encoder, masked_images, preprocessor, cfg.batch_chunk)
    scores = np.array([float(target(e)) for e in embeddings], dtype=np.float64)
    if cfg.baseline == "zero_image":
        zero = PixelImage(np.zeros_like(image.data))
        baseline_emb = _embed_images(encoder, [zero], preprocessor, 1)[0]
        scores = scores - float(target(baseline_emb))

    weights = _softmax(scores)
    cam = np.tensordot(weights, masks, axes=(0, 0))
    cam = np.maximum(cam, 0.0)
    return CamMap(
        values=_minmax(cam),
        source_layer=cfg.layer_tag,
        target_descriptor=target_descriptor,
    )


def localise_number(
    encoder: VisionEncoder,
    provider: TextEmbeddingProvider,
    image: PixelImage,
    number: int,
    cfg: ScoreCamConfig,
    preprocessor: Preprocessor | None = None,
) -> CamMap:
    """Locate a jersey number via a prompt-similarity target.

    Needs an un-fine-tuned tower embedding into the joint space the text
    provider lives in.
    """
    if not JERSEY_NUMBER_MIN <= number <= JERSEY_NUMBER_MAX:
        raise ConfigError(
            f"jersey number {number} outside the prompt classes "
            f"[{JERSEY_NUMBER_MIN}, {JERSEY_NUMBER_MAX}]"
        )
    if encoder.fine_tuned:
        raise JointSpaceError(
            f"encoder {encoder.name!r} was fine-tuned; prompt localisation needs the "
            "pristine joint image-text space"
        )
    prompt = LOCALISATION_TEMPLATE.replace("{c}", str(number))
    prompt_vec = np.asarray(provider.embed(prompt), dtype=np.float64)
    if encoder.embedding_dim != prompt_vec.shape[0]:
        raise JointSpaceError(
            f"encoder embeds into {encoder.embedding_dim} dimensions but the text "
            f"provider into {prompt_vec.shape[0]}; load the tower with its projection enabled"
        )

    def target(embedding: np.ndarray) -> float:
        return float(embedding @ prompt_vec)

    return score_cam(
        encoder, image, target, cfg, preprocessor, target_descriptor=f"prompt:{prompt}"
    )


def similarity_cam(
    encoder: VisionEncoder,
    query_image: PixelImage,
    gallery_image: PixelImage,
    cfg: ScoreCamConfig,
    preprocessor: Preprocessor | None = None,
) -> CamMap:
    """Map over the gallery image of what drives its similarity to the query."""
    if preprocessor is None:
        preprocessor = Preprocessor(encoder.preprocess_config(0.0))
    reference = _embed_images(encoder, [query_image], preprocessor, 1)[0]

    def target(embedding: np.ndarray) -> float:
        return float(embedding @ reference)

    return score_cam(
        encoder, gallery_image, target, cfg, preprocessor, target_descriptor="query-image"
    )


def save_cam_artifacts(
    cam: CamMap, source: PixelImage, out_prefix: str | Path, metadata: dict | None = None
) -> list[Path]:
    """Write `<prefix>.png` (grayscale map), `<prefix>_overlay.png` and
    `<prefix>.json` (metadata); returns the written paths."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)

    gray = (cam.values * 255.0).round().astype(np.uint8)
    map_path = out_prefix.with_name(out_prefix.name + ".png")
    Image.fromarray(gray, mode="L").save(map_path)

    # red-channel heat blended onto the source image
    overlay = source.data.copy()
    heat = cam.values[:, :, None]
    red = np.zeros_like(overlay)
    red[:, :, 0] = 1.0
    blended = (1.0 - 0.5 * heat) * overlay + 0.5 * heat * red
    overlay_path = out_prefix.with_name(out_prefix.name + "_overlay.png")
    Image.fromarray((blended * 255.0).round().astype(np.uint8), mode="RGB").save(overlay_path)

    meta = {
        "source_layer": cam.source_layer,
        "target_descriptor": cam.target_descriptor,
        "shape": list(cam.values.shape),
        "max": float(cam.values.max()),
        "min": float(cam.values.min()),
    }
    if metadata:
        meta.update(metadata)
    meta_path = out_prefix.with_name(out_prefix.name + ".json")
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return [map_path, overlay_path, meta_path]
