"""
Priority assignment at the BM and closed-form sojourn times.

Equal priority is the M/M/1 response time 1/(mu - sum lambda). Under the urgency
discipline every entity is its own preemptive-resume class; with rho_n = lambda_n/mu
and sigma_i = rho_1 + ... + rho_i, rank i waits

    S_i = (sigma_i / mu) / ((1 - sigma_i)(1 - sigma_{i-1})) + (1/mu) / (1 - sigma_{i-1})

which is 1/(mu - lambda_1) at rank 1 and 1/(mu - sum lambda) when all load is in one class.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput, Instability

logger = logging.getLogger(__name__)


class Urgency(Enum):
    Urgent = "urgent"
    Normal = "normal"
    NonUrgent = "non_urgent"

    @property
    def level(self) -> int:
        return _URGENCY_LEVEL[self]


_URGENCY_LEVEL = {Urgency.Urgent: 0, Urgency.Normal: 1, Urgency.NonUrgent: 2}


class SecurityNeed(Enum):
    Standard = "standard"
    High = "high"


class Discipline(Enum):
    EqualPriority = "equal"
    UrgencyPriority = "priority"


@dataclass(frozen=True)
class EntityProfile:
    id: int
    arrival_rate: float
    urgency: Urgency = Urgency.Normal
    weight: float = 1.0
    security_need: SecurityNeed = SecurityNeed.Standard

    def __post_init__(self) -> None:
        if self.id < 1:
            raise InvalidInput(f"Entity ids start at 1, got {self.id}")
        # An idle entity (rate 0) is allowed: it contributes no load.
        if not (math.isfinite(self.arrival_rate) and self.arrival_rate >= 0):
            raise InvalidInput(f"Entity {self.id} arrival rate must be finite and >= 0, got {self.arrival_rate}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise InvalidInput(f"Entity {self.id} weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class QueueSystem:
    entities: tuple[EntityProfile, ...]
    service_rate: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(self.entities))
        if not self.entities:
            raise InvalidInput("A queue system needs at least one entity")
        if not (math.isfinite(self.service_rate) and self.service_rate > 0):
            raise InvalidInput(f"Service rate must be positive, got {self.service_rate}")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise InvalidInput(f"Duplicate entity ids: {sorted(ids)}")

    @property
    def total_arrival_rate(self) -> float:
        return math.fsum(e.arrival_rate for e in self.entities)

    def entity(self, entity_id: int) -> EntityProfile:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise InvalidInput(f"Unknown entity {entity_id}")

    def with_service_rate(self, service_rate: float) -> "QueueSystem":
        return QueueSystem(self.entities, service_rate)


@dataclass(frozen=True)
class PriorityOrder:
    ranked: tuple[int, ...]

    def rank_of(self, entity_id: int) -> int:
        """1-based rank, 1 is served first."""
        return self.ranked.index(entity_id) + 1

    def ranks(self) -> dict[int, int]:
        return {entity_id: i + 1 for i, entity_id in enumerate(self.ranked)}


@dataclass(frozen=True)
class SojournReport:
    discipline: Discipline
    sojourn: dict[int, float]

    def __post_init__(self) -> None:
        if not all(math.isfinite(s) and s > 0 for s in self.sojourn.values()):
            raise InvalidInput(f"Sojourn times must be finite and positive: {self.sojourn}")


def assign_priorities(entities: Iterable[EntityProfile]) -> PriorityOrder:
    items = list(entities)
    if not items:
        raise InvalidInput("Cannot rank an empty entity list")
    ranked = sorted(items, key=lambda e: (e.urgency.level, -e.weight, e.id))
    return PriorityOrder(tuple(e.id for e in ranked))


def stability_margin(system: QueueSystem) -> float:
    return system.service_rate - system.total_arrival_rate


def _require_stable(system: QueueSystem) -> None:
    margin = stability_margin(system)
    if margin <= 0:
        raise Instability(
            f"Unstable queue: sum lambda={system.total_arrival_rate} >= mu={system.service_rate}",
            margin=margin,
        )


def sojourn_equal(system: QueueSystem) -> SojournReport:
    _require_stable(system)
    value = 1.0 / stability_margin(system)
    return SojournReport(Discipline.EqualPriority, {e.id: value for e in system.entities})


def _ordered_rates(system: QueueSystem, order: PriorityOrder) -> tuple[list[int], np.ndarray]:
    if sorted(order.ranked) != sorted(e.id for e in system.entities):
        raise InvalidInput("Priority order is not a permutation of the system's entity ids")
    rates = np.array([system.entity(i).arrival_rate for i in order.ranked], dtype=np.float64)
    return list(order.ranked), rates


def sojourn_priority(system: QueueSystem, order: PriorityOrder) -> SojournReport:
    _require_stable(system)
    ids, rates = _ordered_rates(system, order)
    mu = system.service_rate

    sigma = np.cumsum(rates / mu)
    sigma_before = np.concatenate(([0.0], sigma[:-1]))
    waiting = (sigma / mu) / ((1.0 - sigma) * (1.0 - sigma_before))
    sojourn = waiting + (1.0 / mu) / (1.0 - sigma_before)

    return SojournReport(Discipline.UrgencyPriority, {i: float(s) for i, s in zip(ids, sojourn)})


def coupled_service_rate(block_size: int, latency: float) -> float:
    """mu = n / L: a block of n transactions leaves the BM every L seconds."""
    if block_size < 1 or not latency > 0:
        raise InvalidInput(f"Coupling needs n >= 1 and L > 0, got n={block_size} L={latency}")
    return block_size / latency


@dataclass(frozen=True)
class SojournRow:
    service_rate: float
    entity_id: int
    urgency: Urgency
    rank: int
    equal: float
    priority: float


def sojourn_table(system: QueueSystem, service_rates: Sequence[float], order: PriorityOrder | None = None) -> list[SojournRow]:
    order = order or assign_priorities(system.entities)
    ranks = order.ranks()
    rows: list[SojournRow] = []
    for mu in service_rates:
        swept = system.with_service_rate(mu)
        equal = sojourn_equal(swept).sojourn
        priority = sojourn_priority(swept, order).sojourn
        for entity in sorted(system.entities, key=lambda e: e.id):
            rows.append(SojournRow(mu, entity.id, entity.urgency, ranks[entity.id], equal[entity.id], priority[entity.id]))
        logger.debug(f"Sojourn table at mu={mu}: equal={equal[system.entities[0].id]}")
    return rows


def grouped_entities(rate: float = 2.0) -> tuple[EntityProfile, ...]:
    """21 entities: 1-8 urgent, 9-12 normal, 13-21 non-urgent, constant rate."""
    groups = [(range(1, 9), Urgency.Urgent), (range(9, 13), Urgency.Normal), (range(13, 22), Urgency.NonUrgent)]
    return tuple(EntityProfile(i, rate, urgency) for ids, urgency in groups for i in ids)
