"""Symmetric image-image InfoNCE with temperature scaling and label smoothing.

Query and gallery embeddings of one batch form an n x n cosine-similarity
grid whose diagonal holds the positives; softmax cross-entropy is taken along
rows (query -> gallery) and columns (gallery -> query) and averaged. Both
images of every pair go through the same encoder, so one forward pass over
the concatenated batch serves both directions and doubles the effective
batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

DEFAULT_LOGIT_SCALE = 1.0 / 0.07  # pre-training convention for fresh temperature


@dataclass(frozen=True)
class LossConfig:
    label_smoothing: float = 0.1
    logit_scale_init: float = DEFAULT_LOGIT_SCALE
    logit_scale_trainable: bool = True
    logit_scale_max: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.logit_scale_init <= 0:
            raise ConfigError(f"logit_scale_init must be positive, got {self.logit_scale_init}")
        if self.logit_scale_max <= 0:
            raise ConfigError(f"logit_scale_max must be positive, got {self.logit_scale_max}")


def similarity_logits(
    query: torch.Tensor, gallery: torch.Tensor, logit_scale: torch.Tensor | float
) -> torch.Tensor:
    """Scaled cosine-similarity grid; rows are queries, columns galleries.

    Inputs must be row-unit-norm, so the plain inner product is the cosine.
    """
    if query.ndim != 2 or gallery.ndim != 2:
        raise ValueError("similarity_logits expects 2-D embedding matrices")
    if query.shape != gallery.shape:
        raise ValueError(
            f"query and gallery shapes differ: {tuple(query.shape)} vs {tuple(gallery.shape)}"
        )
    with torch.no_grad():
        for label, emb in (("query", query), ("gallery", gallery)):
            norms = emb.norm(dim=1)
            if (norms < 1e-12).any():
                raise ValueError(f"{label} embeddings contain a zero-norm row")
            if (norms - 1.0).abs().max() > 1e-4:
                raise ValueError(f"{label} embeddings are not unit-norm (pass them through normalization first)")
    return logit_scale * (query @ gallery.T)


def info_nce_symmetric(logits: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Average of row-wise and column-wise smoothed softmax cross-entropy.

    The target for row/column i is (1 - eps) on the diagonal plus eps/n spread
    uniformly over all n classes (the true class included).
    """
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError(f"logit matrix must be square, got shape {tuple(logits.shape)}")
    n = logits.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs n >= 2 (one positive versus n-1 negatives)")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must lie in [0, 1), got {label_smoothing}")

    eps = label_smoothing
    logp_rows = F.log_softmax(logits, dim=1)
    logp_cols = F.log_softmax(logits, dim=0)
    diag_rows = logp_rows.diagonal()
    diag_cols = logp_cols.diagonal()
    row_ce = -((1.0 - eps) * diag_rows + (eps / n) * logp_rows.sum(dim=1)).mean()
    col_ce = -((1.0 - eps) * diag_cols + (eps / n) * logp_cols.sum(dim=0)).mean()
    return 0.5 * (row_ce + col_ce)


def smoothed_loss_floor(n: int, label_smoothing: float) -> float:
    """Entropy of the smoothed target: the infimum of the smoothed CE."""
    eps = label_smoothing
    on_target = 1.0 - eps + eps / n
    off_target = eps / n
    floor = -on_target * math.log(on_target)
    if off_target > 0:
        floor -= (n - 1) * off_target * math.log(off_target)
    return floor


class ContrastiveObjective(nn.Module):
    """Owns the (optionally trainable) temperature and computes the pair loss.

    The scale is stored in log space and clamped after every optimizer step
    via `clamp_scale`, mirroring the pre-training convention it inherits.
    """

    def __init__(self, cfg: LossConfig):
        super().__init__()
        self.cfg = cfg
        init = math.log(cfg.logit_scale_init)
        self.log_logit_scale = nn.Parameter(
            torch.tensor(init, dtype=torch.float32), requires_grad=cfg.logit_scale_trainable
        )

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.log_logit_scale.exp().clamp(max=self.cfg.logit_scale_max)

    @torch.no_grad()
    def clamp_scale(self) -> None:
        self.log_logit_scale.clamp_(max=math.log(self.cfg.logit_scale_max))

    def forward(
        self, query_emb: torch.Tensor, gallery_emb: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        logits = similarity_logits(query_emb, gallery_emb, self.logit_scale)
        loss = info_nce_symmetric(logits, self.cfg.label_smoothing)
        return loss, logits


def dual_view_forward(
    encoder: nn.Module,
    objective: ContrastiveObjective,
    query_pixels: torch.Tensor,
    gallery_pixels: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode query and gallery views in one concatenated pass and score them.

    Both views share the encoder, so the 2n-image pass is numerically
    equivalent to two separate n-image passes (eval mode) while halving the
    number of forward calls.
    """
    if query_pixels.shape != gallery_pixels.shape:
        raise ValueError(
            f"query and gallery pixel batches differ: "
            f"{tuple(query_pixels.shape)} vs {tuple(gallery_pixels.shape)}"
        )
    n = query_pixels.shape[0]
    combined = torch.cat([query_pixels, gallery_pixels], dim=0)
    raw = encoder.embed(combined)
    query_emb = F.normalize(raw[:n], dim=1)
    gallery_emb = F.normalize(raw[n:], dim=1)
    return objective(query_emb, gallery_emb)


def logit_stats(logits: torch.Tensor) -> dict[str, float]:
    """Summary of a logit grid, used in divergence diagnostics and run logs."""
    with torch.no_grad():
        finite = torch.isfinite(logits)
        return {
            "min": float(logits[finite].min()) if finite.any() else float("nan"),
            "max": float(logits[finite].max()) if finite.any() else float("nan"),
            "mean": float(logits[finite].mean()) if finite.any() else float("nan"),
            "diag_mean": float(logits.diagonal()[torch.isfinite(logits.diagonal())].mean())
            if torch.isfinite(logits.diagonal()).any()
            else float("nan"),
            "nonfinite": int((~finite).sum()),
        }
