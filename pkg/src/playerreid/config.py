"""Run configuration: file loading, defaults resolution, hashing.

A run config file (JSON, or YAML when PyYAML is installed) has sections
`dataset`, `encoder`, `preprocess`, `sampler`, `loss`, `train`, `eval` plus
top-level `seed` and `output_dir`. The fully resolved config is serialized to
the run directory before any work starts, and its hash is stamped into every
artifact the run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .loss import LossConfig
from .train import TrainConfig


def _check_keys(section: str, payload: dict, allowed: set[str]) -> None:
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in config section {section!r}: {', '.join(sorted(unknown))}"
        )


@dataclass(frozen=True)
class DatasetSection:
    train_manifests: tuple[str, ...] = ()
    eval_manifest: str | None = None
    annotations: str | None = None


@dataclass(frozen=True)
class EncoderSection:
    name: str = "tiny"
    drop_projection: bool = True
    seed: int = 0
    checkpoint: str | None = None


@dataclass(frozen=True)
class PreprocessSection:
    flip_probability: float = 0.5
    target_size: int | None = None  # None: encoder's native input side
    channel_mean: tuple[float, float, float] | None = None
    channel_std: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class SamplerSection:
    batch_size: int = 16
    drop_last: bool = True
    resample_pairs_each_epoch: bool = True


@dataclass(frozen=True)
class LossSection:
    label_smoothing: float = 0.1
    logit_scale_init: float | None = None  # None: encoder checkpoint value or 1/0.07
    logit_scale_trainable: bool = True
    logit_scale_max: float = 100.0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 8
    lr_max: float | None = None
    lr_min: float | None = None
    warmup_epochs: float = 2.0
    poly_power: float = 1.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eval_every: int | None = None
    selection_metric: str = "mAP_no_rerank"


@dataclass(frozen=True)
class EvalSection:
    rerank: bool = True
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3
    cmc_ks: tuple[int, ...] = (1, 5)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "encoder": EncoderSection,
    "preprocess": PreprocessSection,
    "sampler": SamplerSection,
    "loss": LossSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/run"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.sampler.batch_size,
            lr_max=self.train.lr_max,
            lr_min=self.train.lr_min,
            warmup_epochs=self.train.warmup_epochs,
            poly_power=self.train.poly_power,
            weight_decay=self.train.weight_decay,
            betas=tuple(self.train.betas),
            flip_probability=self.preprocess.flip_probability,
            seed=self.seed,
            eval_every=self.train.eval_every,
            selection_metric=self.train.selection_metric,
            rerank_eval=self.eval.rerank,
            rerank_k1=self.eval.k1,
            rerank_k2=self.eval.k2,
            rerank_lambda=self.eval.lambda_value,
            resample_pairs_each_epoch=self.sampler.resample_pairs_each_epoch,
            drop_last=self.sampler.drop_last,
        )

    def loss_config(self, pretrained_logit_scale: float | None = None) -> LossConfig:
        init = self.loss.logit_scale_init
        if init is None:
            init = pretrained_logit_scale if pretrained_logit_scale else LossConfig().logit_scale_init
        return LossConfig(
            label_smoothing=self.loss.label_smoothing,
            logit_scale_init=init,
            logit_scale_trainable=self.loss.logit_scale_trainable,
            logit_scale_max=self.loss.logit_scale_max,
        )

    def save_resolved(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.resolved.json"
        payload = self.to_dict()
        payload["config_hash"] = self.config_hash()
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        return path


def _coerce(section_name: str, section_cls, payload: dict):
    field_names = {f.name for f in dataclasses.fields(section_cls)}
    _check_keys(section_name, payload, field_names)
    kwargs = {}
    for f in dataclasses.fields(section_cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return section_cls(**kwargs)


def resolve_run_config(raw: dict) -> RunConfig:
    """Build a RunConfig from a raw mapping, rejecting unknown keys.

    When warmup_epochs is not given explicitly it resolves to
    min(2, epochs / 4) so short runs keep a valid warm-up fraction.
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"run config must be a mapping, got {type(raw).__name__}")
    _check_keys("<top level>", raw, {"seed", "output_dir", *_SECTION_TYPES})
    sections = {}
    for key, cls in _SECTION_TYPES.items():
        payload = raw.get(key, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
        sections[key] = _coerce(key, cls, payload)
    train_raw = raw.get("train", {})
    if "warmup_epochs" not in train_raw:
        epochs = sections["train"].epochs
        sections["train"] = dataclasses.replace(
            sections["train"], warmup_epochs=min(2.0, epochs / 4.0)
        )
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "runs/run")),
        **sections,
    )


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Read a JSON/YAML config file and apply section-scoped overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            import yaml
        except ImportError:
            raise ConfigError("YAML config requires PyYAML; use JSON instead") from None
        raw = yaml.safe_load(text) or {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if overrides:
        raw = merge_overrides(raw, overrides)
    return resolve_run_config(raw)


def merge_overrides(raw: dict, overrides: dict) -> dict:
    """Deep-merge override values (e.g. from CLI flags) into a raw config."""
    merged = dict(raw)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged
