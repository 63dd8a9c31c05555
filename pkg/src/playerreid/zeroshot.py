"""Zero-shot attribute classification via prompt similarity, plus zero-shot
re-identification of un-fine-tuned encoders.

Each attribute gets a fixed prompt template rendered once per class; an image
is classified by ranking classes by cosine similarity between its embedding
and the prompt embeddings. Requires image and text embeddings to share the
joint space (contrastive tower with its projection enabled, or a test stub).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    JERSEY_COLOURS,
    JERSEY_NUMBER_MAX,
    JERSEY_NUMBER_MIN,
    SEXES,
    SKIN_COLOURS,
    AttributeAnnotation,
    DatasetSplit,
)
from .encoders import TextEmbeddingProvider, VisionEncoder
from .errors import ConfigError, EvaluationError, JointSpaceError
from .eval import EvalOutcome, evaluate
from .preprocess import Preprocessor
from .train import RecordPixelLoader, embed_split

ATTRIBUTES = ("jersey_number", "jersey_colour", "sex", "skin_colour")

_TEMPLATES = {
    "jersey_number": "a basketball player with jersey number {c}",
    "jersey_colour": "a {c} jersey, {c} colour",
    "sex": "a {c} basketball player",
    "skin_colour": "a {c} basketball player",
}
# alternate phrasing for the jersey colour prompt, selectable via config
_PROSE_COLOUR_TEMPLATE = "a {c} jersey, colour {c}"

_CLASSES = {
    "jersey_number": tuple(range(JERSEY_NUMBER_MIN, JERSEY_NUMBER_MAX + 1)),
    "jersey_colour": JERSEY_COLOURS,
    "sex": SEXES,
    "skin_colour": SKIN_COLOURS,
}

LOCALISATION_TEMPLATE = "jersey number {c}, text number {c}"


@dataclass(frozen=True)
class PromptSet:
    attribute: str
    template: str
    classes: tuple

    def __post_init__(self):
        if "{c}" not in self.template:
            raise ConfigError(f"prompt template {self.template!r} lacks the {{c}} slot")
        if not self.classes:
            raise ConfigError(f"prompt set for {self.attribute!r} has no classes")

    @property
    def rendered(self) -> list[str]:
        return [self.template.replace("{c}", str(c)) for c in self.classes]

    def class_index(self, label) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise EvaluationError(
                f"label {label!r} is not a class of attribute {self.attribute!r}"
            ) from None


def build_prompts(attribute: str, template_variant: str = "table") -> PromptSet:
    """Prompt set for one attribute; jersey colour has a 'prose' variant."""
    if attribute not in ATTRIBUTES:
        raise ConfigError(
            f"unknown attribute {attribute!r}; known attributes: {', '.join(ATTRIBUTES)}"
        )
    template = _TEMPLATES[attribute]
    if attribute == "jersey_colour" and template_variant == "prose":
        template = _PROSE_COLOUR_TEMPLATE
    elif template_variant not in ("table", "prose"):
        raise ConfigError(f"unknown template_variant {template_variant!r}")
    return PromptSet(attribute=attribute, template=template, classes=_CLASSES[attribute])


class PromptEmbeddings:
    """Prompt vectors for one PromptSet, embedded once and cached."""

    def __init__(self, prompts: PromptSet, provider: TextEmbeddingProvider):
        self.prompts = prompts
        self.matrix = np.stack([provider.embed(text) for text in prompts.rendered]).astype(
            np.float64
        )

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def classify_zero_shot(
    image_embedding: np.ndarray,
    prompts: PromptSet,
    provider: TextEmbeddingProvider,
    _cache: PromptEmbeddings | None = None,
) -> list:
    """Classes ranked by descending cosine similarity to the image embedding.

    Ties keep class order (stable sort). A dimension mismatch means the image
    embedding is not in the joint space: the tower's projection was dropped.
    """
    embedded = _cache if _cache is not None else PromptEmbeddings(prompts, provider)
    image_embedding = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    if image_embedding.shape[0] != embedded.dim:
        raise JointSpaceError(
            f"image embedding has dimension {image_embedding.shape[0]} but prompt "
            f"embeddings have {embedded.dim}; the vision projection into the joint "
            "space was probably dropped"
        )
    norm = np.linalg.norm(image_embedding)
    if norm == 0:
        raise EvaluationError("image embedding has zero norm")
    sims = embedded.matrix @ (image_embedding / norm)
    order = np.argsort(-sims, kind="stable")
    return [embedded.prompts.classes[i] for i in order]


def topk_accuracy(predictions: list[list], labels: list, k: int) -> float:
    """Fraction of samples whose true class is among the first k ranked classes."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    if not predictions:
        raise EvaluationError("no predictions to score")
    if len(predictions) != len(labels):
        raise EvaluationError(f"{len(predictions)} predictions for {len(labels)} labels")
    n_classes = min(len(ranked) for ranked in predictions)
    if k > n_classes:
        raise EvaluationError(f"k={k} exceeds the class count {n_classes}")
    hits = sum(1 for ranked, label in zip(predictions, labels) if label in ranked[:k])
    return hits / len(predictions)


@dataclass
class MacroMetrics:
    per_class_precision: dict
    per_class_recall: dict
    per_class_f1: dict
    macro_precision: float
    macro_recall: float
    macro_f1: float


def macro_metrics(predictions: list, labels: list) -> MacroMetrics:
    """Per-class precision/recall/F1 (0 for empty denominators) and their
    unweighted means over the classes present in the labels."""
    if not labels:
        raise EvaluationError("no samples to score")
    if len(predictions) != len(labels):
        raise EvaluationError(f"{len(predictions)} predictions for {len(labels)} labels")
    classes = sorted(set(labels), key=lambda c: str(c))
    precision: dict = {}
    recall: dict = {}
    f1: dict = {}
    for cls in classes:
        tp = sum(1 for p, l in zip(predictions, labels) if p == cls and l == cls)
        fp = sum(1 for p, l in zip(predictions, labels) if p == cls and l != cls)
        fn = sum(1 for p, l in zip(predictions, labels) if p != cls and l == cls)
        prec = tp / (tp + fp) if (tp + fp) else 0.0
        rec = tp / (tp + fn) if (tp + fn) else 0.0
        precision[cls] = prec
        recall[cls] = rec
        f1[cls] = 2 * prec * rec / (prec + rec) if (prec + rec) else 0.0
    return MacroMetrics(
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        macro_precision=float(np.mean([precision[c] for c in classes])),
        macro_recall=float(np.mean([recall[c] for c in classes])),
        macro_f1=float(np.mean([f1[c] for c in classes])),
    )


@dataclass
class AttributeReport:
    attribute: str
    classes: tuple
    topk_accuracy: dict[int, float]
    macro: MacroMetrics
    confusion: np.ndarray  # rows: true class, columns: predicted class
    n_samples: int

    def __post_init__(self):
        for k, acc in self.topk_accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise EvaluationError(f"top-{k} accuracy {acc} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "classes": [str(c) for c in self.classes],
            "topk_accuracy": {str(k): v for k, v in self.topk_accuracy.items()},
            "macro_precision": self.macro.macro_precision,
            "macro_recall": self.macro.macro_recall,
            "macro_f1": self.macro.macro_f1,
            "per_class": {
                str(c): {
                    "precision": self.macro.per_class_precision.get(c, 0.0),
                    "recall": self.macro.per_class_recall.get(c, 0.0),
                    "f1": self.macro.per_class_f1.get(c, 0.0),
                }
                for c in self.classes
                if c in self.macro.per_class_precision
            },
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    def save_confusion_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + [str(c) for c in self.classes])
            for i, cls in enumerate(self.classes):
                writer.writerow([str(cls)] + [int(x) for x in self.confusion[i]])
        return path


def evaluate_attribute(
    image_embeddings: dict[str, np.ndarray],
    annotations: dict[str, AttributeAnnotation],
    prompts: PromptSet,
    provider: TextEmbeddingProvider,
    ks: tuple[int, ...] = (1, 3),
) -> AttributeReport:
    """Classify every annotated image with a label for this attribute and
    aggregate top-k accuracy, macro metrics and the confusion matrix."""
    cache = PromptEmbeddings(prompts, provider)
    ranked_all: list[list] = []
    labels: list = []
    for record_id, ann in annotations.items():
        label = ann.value(prompts.attribute)
        if label is None:
            continue
        if record_id not in image_embeddings:
            raise EvaluationError(f"no embedding for annotated record {record_id!r}")
        ranked_all.append(
            classify_zero_shot(image_embeddings[record_id], prompts, provider, _cache=cache)
        )
        labels.append(label)
    if not labels:
        raise EvaluationError(f"no annotations carry attribute {prompts.attribute!r}")

    top1 = [ranked[0] for ranked in ranked_all]
    confusion = np.zeros((len(prompts.classes), len(prompts.classes)), dtype=np.int64)
    for pred, label in zip(top1, labels):
        confusion[prompts.class_index(label), prompts.class_index(pred)] += 1

    return AttributeReport(
        attribute=prompts.attribute,
        classes=prompts.classes,
        topk_accuracy={k: topk_accuracy(ranked_all, labels, k) for k in ks if k <= len(prompts.classes)},
        macro=macro_metrics(top1, labels),
        confusion=confusion,
        n_samples=len(labels),
    )


def zero_shot_reid(
    encoder: VisionEncoder,
    split: DatasetSplit,
    rerank: bool = True,
    k1: int = 20,
    k2: int = 6,
    lambda_value: float = 0.3,
) -> EvalOutcome:
    """Retrieval evaluation of an encoder that was never trained on the data."""
    if encoder.fine_tuned:
        raise ConfigError(
            f"encoder {encoder.name!r} was fine-tuned (step {encoder.training_step}); "
            "zero-shot evaluation expects pristine pretrained weights"
        )
    loader = RecordPixelLoader(Preprocessor(encoder.preprocess_config(0.0)))
    query_emb, gallery_emb = embed_split(encoder, split, loader)
    outcome = evaluate(
        query_emb, gallery_emb, rerank=rerank, k1=k1, k2=k2, lambda_value=lambda_value, zero_shot=True
    )
    outcome.encoder_name = encoder.name
    return outcome
