"""Synthetic color-coded corpus so the whole pipeline runs offline.

Each identity owns a base hue (golden-ratio spaced) and a stripe at an
identity-specific row; images vary by brightness jitter, stripe jitter and
pixel noise. Output: PNG crops, train/test manifests in the standard CSV
layout and an attribute annotation file.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import JERSEY_COLOURS, SEXES, SKIN_COLOURS
from .errors import ConfigError

_HUE_WHEEL = 16  # identity = (hue, saturation, brightness), 16 x 2 x 2


@dataclass(frozen=True)
class SynthConfig:
    n_players: int = 64
    queries_per_player: int = 1
    gallery_per_player: int = 8
    test_queries_per_player: int = 1
    test_gallery_per_player: int = 3
    height: int = 48
    width: int = 24
    brightness_jitter: float = 0.1
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_players < 1:
            raise ConfigError(f"n_players must be >= 1, got {self.n_players}")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"images must be at least 8x8, got {self.height}x{self.width}")
        if min(self.queries_per_player, self.gallery_per_player) < 1:
            raise ConfigError("each player needs at least one query and one gallery image")


def _identity_signature(index: int) -> tuple[float, float, float]:
    """Base colour of one identity.

    Factors are chosen far enough apart that jitter and noise cannot bridge
    them: 16 hues 22.5 degrees apart, two saturations (invariant to the
    multiplicative brightness jitter) and two brightness levels. All of them
    are global colour statistics that survive horizontal flips and pooling.
    """
    hue = (index % _HUE_WHEEL) / _HUE_WHEEL
    saturation = 0.85 if (index // _HUE_WHEEL) % 2 == 0 else 0.45
    value = 0.95 if (index // (2 * _HUE_WHEEL)) % 2 == 0 else 0.55
    return colorsys.hsv_to_rgb(hue, saturation, value)


def _render(cfg: SynthConfig, player_index: int, rng: np.random.Generator) -> np.ndarray:
    base_color = _identity_signature(player_index)
    img = np.tile(np.array(base_color, dtype=np.float64), (cfg.height, cfg.width, 1))

    brightness = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    img = img * brightness

    # per-image nuisance stripe the encoder must learn to ignore
    stripe_row = int(rng.integers(0, cfg.height - 3))
    img[stripe_row : stripe_row + 3, :, :] = float(rng.integers(0, 2))

    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray((pixels * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def generate_corpus(out_dir: str | Path, cfg: SynthConfig) -> dict[str, Path]:
    """Write images, manifests and annotations; returns the artifact paths."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    manifests: dict[str, Path] = {}
    for split_name, n_query, n_gallery in (
        ("train", cfg.queries_per_player, cfg.gallery_per_player),
        ("test", cfg.test_queries_per_player, cfg.test_gallery_per_player),
    ):
        rows = []
        for p in range(cfg.n_players):
            pid = f"player{p:03d}"
            for role, count in (("query", n_query), ("gallery", n_gallery)):
                for j in range(count):
                    record_id = f"{split_name}-{pid}-{role}{j}"
                    filename = image_dir / f"{record_id}.png"
                    _save_png(filename, _render(cfg, p, rng))
                    rows.append(
                        [record_id, pid, role, str(filename), str(cfg.height), str(cfg.width)]
                    )
        manifest_path = out_dir / f"{split_name}.csv"
        with manifest_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_id", "player_id", "role", "image_path", "height", "width"])
            writer.writerows(rows)
        manifests[split_name] = manifest_path

    annotation_path = out_dir / "attributes.csv"
    with annotation_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "jersey_number", "jersey_colour", "sex", "skin_colour"])
        for p in range(cfg.n_players):
            writer.writerow(
                [
                    f"train-player{p:03d}-query0",
                    str((p % 32) + 1),
                    JERSEY_COLOURS[p % len(JERSEY_COLOURS)],
                    SEXES[p % len(SEXES)],
                    SKIN_COLOURS[(p // 2) % len(SKIN_COLOURS)],
                ]
            )
    manifests["attributes"] = annotation_path
    return manifests
