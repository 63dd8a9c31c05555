"""Batch scheduling with the distinct-player constraint.

Every training batch must contain instances of pairwise distinct players;
otherwise a gallery image could not be assigned unambiguously to its query
within the batch. Each batch takes one instance from each of the n players
with the most instances still unscheduled (ties broken by a seeded shuffle),
which yields the maximal number of full batches; leftovers that cannot fill
a batch are dropped under drop_last, else flushed as shorter batches.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .data import PairInstance
from .errors import SamplerError


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 16
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise SamplerError(
                f"batch_size must be >= 2 (one positive needs at least one negative), "
                f"got {self.batch_size}"
            )


@dataclass(frozen=True)
class Batch:
    instances: tuple[PairInstance, ...]

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def player_ids(self) -> list[str]:
        return [inst.player_id for inst in self.instances]


@dataclass
class ViolationReport:
    duplicated_players: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.duplicated_players


def validate_batch(batch: Batch) -> ViolationReport:
    """Report player ids that appear more than once in a batch."""
    seen: set[str] = set()
    duplicated: list[str] = []
    for pid in batch.player_ids:
        if pid in seen and pid not in duplicated:
            duplicated.append(pid)
        seen.add(pid)
    return ViolationReport(duplicated_players=duplicated)


def sample_epoch(instances: list[PairInstance], cfg: SamplerConfig) -> list[Batch]:
    """Partition one epoch's instances into distinct-player batches.

    Deterministic given cfg.seed; each instance is used at most once. With
    drop_last, every batch has exactly cfg.batch_size instances; taking from
    the most-loaded players first maximizes the number of full batches.
    """
    distinct_players = {inst.player_id for inst in instances}
    if len(distinct_players) < cfg.batch_size:
        raise SamplerError(
            f"need >= {cfg.batch_size} distinct players for batch_size "
            f"{cfg.batch_size}, found {len(distinct_players)}"
        )

    rng = random.Random(cfg.seed)
    pool = list(instances)
    rng.shuffle(pool)
    by_player: dict[str, list[PairInstance]] = {}
    for inst in pool:
        by_player.setdefault(inst.player_id, []).append(inst)
    # seeded tie-break rank for players with equal remaining counts
    shuffled_pids = list(by_player)
    rng.shuffle(shuffled_pids)
    order = {pid: rank for rank, pid in enumerate(shuffled_pids)}

    batches: list[Batch] = []
    while by_player:
        eligible = sorted(by_player, key=lambda pid: (-len(by_player[pid]), order[pid]))
        if len(eligible) < cfg.batch_size and cfg.drop_last:
            break
        chosen = eligible[: cfg.batch_size]
        members = []
        for pid in chosen:
            members.append(by_player[pid].pop())
            if not by_player[pid]:
                del by_player[pid]
        batches.append(Batch(instances=tuple(members)))
    return batches
