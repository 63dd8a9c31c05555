"""Fine-tuning loop: AdamW, polynomial warm-up schedule, per-epoch retrieval
evaluation and best-checkpoint selection by mAP.

All randomness (pairing, batch schedule, flip augmentation, encoder init)
derives from the run seed over a single-worker data path, so two runs with
the same seed produce identical loss traces.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, ImageRecord, build_pair_instances
from .embeddings import EmbeddingMatrix
from .encoders import VisionEncoder, encode_normalized, save_checkpoint
from .encoders.base import LR_FAMILY_TRANSFORMER
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .eval import EvalOutcome, evaluate
from .loss import ContrastiveObjective, LossConfig, dual_view_forward, logit_stats
from .preprocess import PixelImage, Preprocessor, load_image
from .sampler import SamplerConfig, sample_epoch

logger = logging.getLogger(__name__)

SELECTION_METRICS = ("mAP_no_rerank", "mAP_rerank")

# schedule defaults per architecture family (max, min); the tiny reference
# encoder trains from scratch and wants a much hotter schedule
TRANSFORMER_LR = (4e-5, 4e-6)
CONVOLUTIONAL_LR = (4e-4, 4e-5)
REFERENCE_LR = (2e-3, 2e-4)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr_max: float | None = None  # None: resolved from the encoder's family
    lr_min: float | None = None
    warmup_epochs: float = 2.0
    poly_power: float = 1.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    flip_probability: float = 0.5
    seed: int = 0
    eval_every: int | None = None  # steps; None evaluates once per epoch
    selection_metric: str = "mAP_no_rerank"
    rerank_eval: bool = True
    rerank_k1: int = 20
    rerank_k2: int = 6
    rerank_lambda: float = 0.3
    resample_pairs_each_epoch: bool = True
    drop_last: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must lie in (0, epochs), got {self.warmup_epochs} of {self.epochs}"
            )
        if self.lr_max is not None and self.lr_min is not None and self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be positive, got {self.poly_power}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(
                f"selection_metric must be one of {SELECTION_METRICS}, got {self.selection_metric!r}"
            )
        if self.selection_metric == "mAP_rerank" and not self.rerank_eval:
            raise ConfigError("selection by mAP_rerank requires rerank_eval")

    def resolved_lr(self, encoder: VisionEncoder) -> tuple[float, float]:
        if encoder.family == "reference":
            defaults = REFERENCE_LR
        elif encoder.lr_family == LR_FAMILY_TRANSFORMER:
            defaults = TRANSFORMER_LR
        else:
            defaults = CONVOLUTIONAL_LR
        lr_max = self.lr_max if self.lr_max is not None else defaults[0]
        lr_min = self.lr_min if self.lr_min is not None else defaults[1]
        if lr_min > lr_max:
            raise ConfigError(f"resolved lr_min {lr_min} exceeds lr_max {lr_max}")
        return lr_max, lr_min


def poly_warmup_lr(
    step: int,
    total_steps: int,
    warmup_steps: int,
    lr_max: float,
    lr_min: float,
    power: float = 1.0,
) -> float:
    """Linear ramp 0 -> lr_max over the warm-up, then polynomial decay to lr_min.

    Continuous at the junction (both sides equal lr_max) and monotone
    non-increasing afterwards; lr(total_steps) == lr_min exactly.
    """
    if not 0 < warmup_steps < total_steps:
        raise ConfigError(f"need 0 < warmup_steps < total_steps, got {warmup_steps} of {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if lr_min > lr_max:
        raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}")
    if power <= 0:
        raise ConfigError(f"power must be positive, got {power}")
    if step <= warmup_steps:
        return lr_max * step / warmup_steps
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + (lr_max - lr_min) * (1.0 - t) ** power


@dataclass
class StepEvent:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class EvalEvent:
    epoch: int
    step: int
    map_no_rerank: float
    map_rerank: float | None
    rank1: float
    rank5: float
    checkpoint: str

    def metric(self, name: str) -> float:
        if name == "mAP_no_rerank":
            return self.map_no_rerank
        if name == "mAP_rerank":
            if self.map_rerank is None:
                raise CheckpointError("history has no re-ranked mAP to select on")
            return self.map_rerank
        raise CheckpointError(f"unknown selection metric {name!r}")


@dataclass
class TrainHistory:
    steps: list[StepEvent] = field(default_factory=list)
    evals: list[EvalEvent] = field(default_factory=list)
    best_index: int | None = None

    @property
    def best_checkpoint(self) -> str:
        if self.best_index is None:
            raise CheckpointError("training produced no evaluation rows")
        return self.evals[self.best_index].checkpoint

    def epoch_mean_losses(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for event in self.steps:
            sums.setdefault(event.epoch, []).append(event.loss)
        return {epoch: float(np.mean(losses)) for epoch, losses in sums.items()}


def select_best_checkpoint(history: TrainHistory, metric: str = "mAP_no_rerank") -> int:
    """Index of the eval row maximizing the metric; ties keep the earliest."""
    if not history.evals:
        raise CheckpointError("cannot select a checkpoint from an empty history")
    best_idx = 0
    best_value = history.evals[0].metric(metric)
    for idx, event in enumerate(history.evals[1:], start=1):
        value = event.metric(metric)
        if value > best_value:
            best_idx, best_value = idx, value
    return best_idx


class RecordPixelLoader:
    """Loads and preprocesses records; caches decoded pixels as uint8."""

    def __init__(self, preprocessor: Preprocessor, cache_decoded: bool = True):
        self.preprocessor = preprocessor
        self._cache: dict[str, np.ndarray] | None = {} if cache_decoded else None

    def _decoded(self, record: ImageRecord):
        if self._cache is None:
            return load_image(record.image_path)
        if record.record_id not in self._cache:
            data = load_image(record.image_path).data
            self._cache[record.record_id] = (data * 255.0).round().astype(np.uint8)
        return PixelImage(self._cache[record.record_id].astype(np.float64) / 255.0)

    def batch(
        self,
        records: list[ImageRecord],
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> torch.Tensor:
        images = [self._decoded(rec) for rec in records]
        return self.preprocessor.prepare_batch(images, train=train, rng=rng)


def embed_split(
    encoder: VisionEncoder,
    split: DatasetSplit,
    loader: RecordPixelLoader,
    chunk: int = 64,
) -> tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Encode a split's query and gallery records (eval path, no flips)."""
    def encode(records: list[ImageRecord]) -> EmbeddingMatrix:
        pixels = loader.batch(records, train=False)
        return encode_normalized(
            encoder,
            pixels,
            ids=[r.record_id for r in records],
            pids=[r.player_id for r in records],
            chunk=chunk,
        )

    return encode(split.query_records), encode(split.gallery_records)


class _HistoryWriter:
    def __init__(self, run_dir: Path | None):
        self.path = run_dir / "history.jsonl" if run_dir else None
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def write(self, payload: dict) -> None:
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload, sort_keys=True) + "\n")


def train(
    cfg: TrainConfig,
    split: DatasetSplit,
    eval_split: DatasetSplit,
    encoder: VisionEncoder,
    loss_cfg: LossConfig | None = None,
    run_dir: str | Path | None = None,
    config_hash: str = "",
) -> tuple[str, TrainHistory]:
    """Run the fine-tuning loop; returns (best checkpoint path, history).

    Checkpoints land in run_dir as ckpt-epochN.pt (plus JSON headers) with a
    `best` pointer file; without a run_dir, checkpoints go to a `checkpoints`
    subdirectory of the current directory.
    """
    run_dir = Path(run_dir) if run_dir is not None else Path("checkpoints")
    run_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    flip_rng = np.random.default_rng(cfg.seed)

    if loss_cfg is None:
        init_scale = encoder.pretrained_logit_scale
        loss_cfg = LossConfig(logit_scale_init=init_scale) if init_scale else LossConfig()
    objective = ContrastiveObjective(loss_cfg)

    lr_max, lr_min = cfg.resolved_lr(encoder)
    preprocessor = Preprocessor(encoder.preprocess_config(cfg.flip_probability))
    loader = RecordPixelLoader(preprocessor)

    instances = build_pair_instances(split, seed=cfg.seed)
    steps_per_epoch = len(instances) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError(
            f"{len(instances)} usable instances cannot fill one batch of {cfg.batch_size}"
        )
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = max(1, int(round(cfg.warmup_epochs * steps_per_epoch)))

    param_groups = [
        {"params": [p for p in encoder.parameters() if p.requires_grad]},
        {"params": [objective.log_logit_scale], "weight_decay": 0.0},
    ]
    optimizer = torch.optim.AdamW(
        param_groups, lr=lr_min, betas=cfg.betas, weight_decay=cfg.weight_decay
    )

    history = TrainHistory()
    writer = _HistoryWriter(run_dir)
    step = 0

    def run_eval(epoch: int) -> None:
        query_emb, gallery_emb = embed_split(encoder, eval_split, loader)
        outcome: EvalOutcome = evaluate(
            query_emb,
            gallery_emb,
            rerank=cfg.rerank_eval,
            k1=cfg.rerank_k1,
            k2=cfg.rerank_k2,
            lambda_value=cfg.rerank_lambda,
        )
        ckpt_path = run_dir / f"ckpt-epoch{epoch}.pt"
        encoder.training_step = step
        save_checkpoint(
            encoder,
            ckpt_path,
            extra={
                "log_logit_scale": float(objective.log_logit_scale.detach()),
                "config_hash": config_hash,
            },
        )
        event = EvalEvent(
            epoch=epoch,
            step=step,
            map_no_rerank=outcome.raw.mean_ap,
            map_rerank=outcome.reranked.mean_ap if outcome.reranked else None,
            rank1=outcome.raw.cmc.get(1, float("nan")),
            rank5=outcome.raw.cmc.get(5, float("nan")),
            checkpoint=str(ckpt_path),
        )
        history.evals.append(event)
        writer.write(
            {
                "type": "eval",
                "epoch": epoch,
                "step": step,
                "mAP_no_rerank": event.map_no_rerank,
                "mAP_rerank": event.map_rerank,
                "rank1": event.rank1,
                "rank5": event.rank5,
                "checkpoint": ckpt_path.name,
            }
        )
        logger.info(
            "epoch %d: mAP %.4f%s",
            epoch,
            event.map_no_rerank,
            f" (reranked {event.map_rerank:.4f})" if event.map_rerank is not None else "",
        )

    encoder.train()
    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = cfg.seed + epoch if cfg.resample_pairs_each_epoch else cfg.seed
        epoch_instances = (
            build_pair_instances(split, seed=epoch_seed)
            if cfg.resample_pairs_each_epoch
            else instances
        )
        batches = sample_epoch(
            epoch_instances,
            SamplerConfig(batch_size=cfg.batch_size, seed=epoch_seed, drop_last=cfg.drop_last),
        )
        for batch in batches:
            # schedule is evaluated at the completed-step count + 1, so the
            # first update is non-zero and the last lands exactly on lr_min
            lr = poly_warmup_lr(
                min(step + 1, total_steps), total_steps, warmup_steps, lr_max, lr_min, cfg.poly_power
            )
            for group in optimizer.param_groups:
                group["lr"] = lr

            query_pixels = loader.batch(
                [inst.query_record for inst in batch.instances], train=True, rng=flip_rng
            )
            gallery_pixels = loader.batch(
                [inst.gallery_record for inst in batch.instances], train=True, rng=flip_rng
            )
            loss, logits = dual_view_forward(encoder, objective, query_pixels, gallery_pixels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (epoch {epoch})",
                    logit_stats=logit_stats(logits),
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            objective.clamp_scale()
            step += 1

            event = StepEvent(step=step, epoch=epoch, lr=lr, loss=float(loss.detach()))
            history.steps.append(event)
            writer.write(
                {"type": "step", "step": step, "epoch": epoch, "lr": lr, "loss": event.loss}
            )
            if cfg.eval_every and step % cfg.eval_every == 0:
                run_eval(epoch)
                encoder.train()
        if not cfg.eval_every:
            run_eval(epoch)
            encoder.train()

    if not history.evals:
        run_eval(cfg.epochs)
    history.best_index = select_best_checkpoint(history, cfg.selection_metric)
    best_path = history.best_checkpoint
    (run_dir / "best").write_text(Path(best_path).name + "\n", encoding="utf-8")
    return best_path, history
