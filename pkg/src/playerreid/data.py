"""Dataset ingestion: manifests, splits, training pairs and attribute annotations.

A split lives on disk as a CSV manifest with header
``record_id,player_id,role,image_path,height,width``; attribute annotations as
``record_id,jersey_number,jersey_colour,sex,skin_colour`` (empty field = absent).
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import AnnotationError, ManifestError

logger = logging.getLogger(__name__)

ROLE_QUERY = "query"
ROLE_GALLERY = "gallery"
_ROLES = (ROLE_QUERY, ROLE_GALLERY)

MANIFEST_HEADER = ["record_id", "player_id", "role", "image_path", "height", "width"]
ANNOTATION_HEADER = ["record_id", "jersey_number", "jersey_colour", "sex", "skin_colour"]

JERSEY_COLOURS = ("black", "blue", "green", "orange", "red", "white", "yellow")
SEXES = ("male", "female")
SKIN_COLOURS = ("white", "black")
JERSEY_NUMBER_MIN = 1
JERSEY_NUMBER_MAX = 32


@dataclass(frozen=True)
class ImageRecord:
    """One player crop: identity, retrieval role and image location."""

    record_id: str
    player_id: str
    role: str
    image_path: Path
    height_px: int
    width_px: int

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ManifestError(f"unknown role token {self.role!r} for record {self.record_id!r}")
        if self.height_px <= 0 or self.width_px <= 0:
            raise ManifestError(
                f"record {self.record_id!r} has non-positive size "
                f"{self.height_px}x{self.width_px}"
            )


@dataclass(frozen=True)
class DatasetSplit:
    """An ordered collection of records plus the set of player identities.

    For training, pairs are only formable for players that own at least one
    query record; gallery-only players are tolerated here and skipped (with a
    logged count) by :func:`build_pair_instances`.
    """

    name: str
    records: tuple[ImageRecord, ...]

    @property
    def players(self) -> frozenset[str]:
        return frozenset(r.player_id for r in self.records)

    @property
    def query_records(self) -> list[ImageRecord]:
        return [r for r in self.records if r.role == ROLE_QUERY]

    @property
    def gallery_records(self) -> list[ImageRecord]:
        return [r for r in self.records if r.role == ROLE_GALLERY]

    def records_by_player(self) -> dict[str, list[ImageRecord]]:
        by_player: dict[str, list[ImageRecord]] = {}
        for rec in self.records:
            by_player.setdefault(rec.player_id, []).append(rec)
        return by_player


@dataclass(frozen=True)
class PairInstance:
    """A (query image, gallery image) pair of one player: the atomic training unit."""

    player_id: str
    query_record: ImageRecord
    gallery_record: ImageRecord

    def __post_init__(self):
        if not (self.query_record.player_id == self.gallery_record.player_id == self.player_id):
            raise ManifestError(
                f"pair for player {self.player_id!r} mixes records of players "
                f"{self.query_record.player_id!r} and {self.gallery_record.player_id!r}"
            )
        if self.query_record.role != ROLE_QUERY or self.gallery_record.role != ROLE_GALLERY:
            raise ManifestError(
                f"pair for player {self.player_id!r} has roles "
                f"({self.query_record.role}, {self.gallery_record.role}), expected (query, gallery)"
            )


@dataclass(frozen=True)
class AttributeAnnotation:
    """Per-image attribute labels for the zero-shot probe."""

    record_id: str
    jersey_number: int | None
    jersey_colour: str | None
    sex: str | None
    skin_colour: str | None

    def __post_init__(self):
        if self.jersey_number is not None and not (
            JERSEY_NUMBER_MIN <= self.jersey_number <= JERSEY_NUMBER_MAX
        ):
            raise AnnotationError(
                f"record {self.record_id!r}: jersey_number {self.jersey_number} outside "
                f"[{JERSEY_NUMBER_MIN}, {JERSEY_NUMBER_MAX}]"
            )
        for name, value, allowed in (
            ("jersey_colour", self.jersey_colour, JERSEY_COLOURS),
            ("sex", self.sex, SEXES),
            ("skin_colour", self.skin_colour, SKIN_COLOURS),
        ):
            if value is not None and value not in allowed:
                raise AnnotationError(
                    f"record {self.record_id!r}: unknown {name} token {value!r} "
                    f"(allowed: {', '.join(allowed)})"
                )

    def value(self, attribute: str):
        if attribute not in ("jersey_number", "jersey_colour", "sex", "skin_colour"):
            raise AnnotationError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)


def load_manifest(path: str | Path, name: str | None = None) -> DatasetSplit:
    """Parse a CSV manifest into a DatasetSplit, preserving row order.

    Raises ManifestError on a missing file, malformed row, duplicate
    record_id, unknown role token or an empty manifest.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    split_name = name if name is not None else path.stem

    records: list[ImageRecord] = []
    seen_ids: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty: no records") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"manifest {path} has header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            record_id, player_id, role, image_path, height, width = (c.strip() for c in row)
            if record_id in seen_ids:
                raise ManifestError(f"{path}:{lineno}: duplicate record_id {record_id!r}")
            seen_ids.add(record_id)
            try:
                height_px, width_px = int(height), int(width)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: malformed height/width ({height!r}, {width!r})"
                ) from None
            records.append(
                ImageRecord(
                    record_id=record_id,
                    player_id=player_id,
                    role=role,
                    image_path=Path(image_path),
                    height_px=height_px,
                    width_px=width_px,
                )
            )

    if not records:
        raise ManifestError(f"manifest {path} has no records")

    split = DatasetSplit(name=split_name, records=tuple(records))
    orphans = gallery_only_players(split)
    if orphans:
        logger.warning(
            "split %s: %d player(s) have gallery records but no query record "
            "and cannot form training pairs", split_name, len(orphans)
        )
    return split


def merge_splits(splits: list[DatasetSplit], name: str = "merged") -> DatasetSplit:
    """Concatenate several splits into one, rejecting duplicate record ids."""
    seen: set[str] = set()
    records: list[ImageRecord] = []
    for split in splits:
        for rec in split.records:
            if rec.record_id in seen:
                raise ManifestError(
                    f"cannot merge splits: duplicate record_id {rec.record_id!r} "
                    f"(second occurrence in split {split.name!r})"
                )
            seen.add(rec.record_id)
            records.append(rec)
    if not records:
        raise ManifestError("cannot merge splits: no records")
    return DatasetSplit(name=name, records=tuple(records))


def save_manifest(split: DatasetSplit, path: str | Path) -> Path:
    """Write a split back out in the standard manifest layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for rec in split.records:
            writer.writerow(
                [rec.record_id, rec.player_id, rec.role, str(rec.image_path),
                 rec.height_px, rec.width_px]
            )
    return path


def gallery_only_players(split: DatasetSplit) -> set[str]:
    query_players = {r.player_id for r in split.records if r.role == ROLE_QUERY}
    gallery_players = {r.player_id for r in split.records if r.role == ROLE_GALLERY}
    return gallery_players - query_players


def build_pair_instances(split: DatasetSplit, seed: int) -> list[PairInstance]:
    """Form one training pair per gallery record.

    Each gallery record is paired with a query record of the same player
    chosen uniformly at random (seeded), so every gallery image is used
    exactly once per regeneration. Players with gallery records but no query
    record are skipped with a logged count. Pure function of (split, seed).
    """
    rng = random.Random(seed)
    queries_by_player: dict[str, list[ImageRecord]] = {}
    for rec in split.records:
        if rec.role == ROLE_QUERY:
            queries_by_player.setdefault(rec.player_id, []).append(rec)

    instances: list[PairInstance] = []
    skipped_players: set[str] = set()
    for rec in split.records:
        if rec.role != ROLE_GALLERY:
            continue
        queries = queries_by_player.get(rec.player_id)
        if not queries:
            skipped_players.add(rec.player_id)
            continue
        query = queries[0] if len(queries) == 1 else rng.choice(queries)
        instances.append(
            PairInstance(player_id=rec.player_id, query_record=query, gallery_record=rec)
        )
    if skipped_players:
        logger.warning(
            "build_pair_instances: skipped %d player(s) without a query record",
            len(skipped_players),
        )
    return instances


def _parse_annotation_row(path: Path, lineno: int, row: list[str]) -> AttributeAnnotation:
    record_id, number, colour, sex, skin = (c.strip() for c in row)
    jersey_number: int | None = None
    if number:
        try:
            jersey_number = int(number)
        except ValueError:
            raise AnnotationError(f"{path}:{lineno}: malformed jersey_number {number!r}") from None
    try:
        return AttributeAnnotation(
            record_id=record_id,
            jersey_number=jersey_number,
            jersey_colour=colour or None,
            sex=sex or None,
            skin_colour=skin or None,
        )
    except AnnotationError as exc:
        raise AnnotationError(f"{path}:{lineno}: {exc}") from None


def load_attribute_annotations(
    path: str | Path, split: DatasetSplit | None = None
) -> dict[str, AttributeAnnotation]:
    """Load attribute annotations keyed by record_id.

    When a split is given, every annotated record_id must belong to it.
    An empty file (header only) yields an empty map.
    """
    path = Path(path)
    if not path.is_file():
        raise AnnotationError(f"annotation file not found: {path}")

    annotations: dict[str, AttributeAnnotation] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return {}
        if [h.strip() for h in header] != ANNOTATION_HEADER:
            raise AnnotationError(
                f"annotation file {path} has header {header!r}, expected {ANNOTATION_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise AnnotationError(
                    f"{path}:{lineno}: expected {len(ANNOTATION_HEADER)} fields, got {len(row)}"
                )
            ann = _parse_annotation_row(path, lineno, row)
            if ann.record_id in annotations:
                raise AnnotationError(f"{path}:{lineno}: duplicate record_id {ann.record_id!r}")
            annotations[ann.record_id] = ann

    if split is not None:
        known = {r.record_id for r in split.records}
        missing = [rid for rid in annotations if rid not in known]
        if missing:
            raise AnnotationError(
                f"annotation file {path} references record_ids absent from split "
                f"{split.name!r}: {', '.join(sorted(missing)[:5])}"
                + ("..." if len(missing) > 5 else "")
            )
    return annotations
