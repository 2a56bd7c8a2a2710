"""
The Blockchain Manager: transaction intake, channel allocation, per-channel
configuration and block formation.

Three canonical channels: 1 carries urgent data, 2 carries high-security data that is
not urgent, 3 carries everything else. Further channels (a fixed reference
configuration, say) can be bound but never receive allocated traffic.
"""

import heapq
import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .chain_optimizer import (
    ChainConfig,
    ChainParams,
    MetricWeights,
    NormalizationBounds,
    TraceRow,
    ValidatorProfile,
    bco,
    configure,
    default_bounds,
    evaluate,
    order_validators,
)
from .errors import ConfigurationError, Infeasible, InvalidInput
from .payload import PayloadKind, SharePayload
from .priority_queue import SecurityNeed, Urgency

URGENT_CHANNEL = 1
SECURE_CHANNEL = 2
NORMAL_CHANNEL = 3
CANONICAL_CHANNELS = (URGENT_CHANNEL, SECURE_CHANNEL, NORMAL_CHANNEL)

logger = logging.getLogger(__name__)


class TransactionKind(Enum):
    EmergencyNotification = "emergency_notification"
    RawData = "raw_data"
    FeatureSummary = "feature_summary"
    LegalDocument = "legal_document"


class ChannelMode(Enum):
    Restricted = "restricted"
    FullyRestricted = "fully_restricted"
    Optimized = "optimized"
    Fixed = "fixed"


@dataclass(frozen=True)
class Transaction:
    id: int
    entity_id: int
    kind: TransactionKind
    urgency: Urgency
    security_need: SecurityNeed = SecurityNeed.Standard
    size: float = 500.0
    created_at: float = 0.0

    def __post_init__(self) -> None:
        if not self.size > 0:
            raise InvalidInput(f"Transaction {self.id} size must be positive, got {self.size}")
        if self.kind is TransactionKind.EmergencyNotification and self.urgency is not Urgency.Urgent:
            raise InvalidInput(f"Emergency notification {self.id} must be urgent")


@dataclass(frozen=True)
class ChannelSpec:
    id: int
    mode: ChannelMode
    weights: MetricWeights
    m: int | None = None
    n: int | None = None
    validator_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Channel:
    id: int
    mode: ChannelMode
    config: ChainConfig
    weights: MetricWeights
    trace: tuple[TraceRow, ...] = ()

    @property
    def block_size(self) -> int:
        return self.config.n

    @property
    def verification_latency(self) -> float:
        return self.config.latency


@dataclass(frozen=True)
class Block:
    id: int
    channel_id: int
    transactions: tuple[Transaction, ...]
    formed_at: float

    def __post_init__(self) -> None:
        if not self.transactions:
            raise InvalidInput("A block cannot be empty")


@dataclass(frozen=True)
class DispatchRecord:
    transaction_id: int
    entity_id: int
    channel_id: int
    enqueued_at: float
    block_id: int | None = None
    formed_at: float | None = None
    committed_at: float | None = None


def allocate_channel(tx: Transaction, channels: Mapping[int, Channel] | Iterable[int]) -> int:
    available = set(channels)
    missing = [c for c in CANONICAL_CHANNELS if c not in available]
    if missing:
        raise ConfigurationError(f"Channel table lacks canonical channels {missing}", field="channels")

    if tx.urgency is Urgency.Urgent:
        return URGENT_CHANNEL
    if tx.security_need is SecurityNeed.High:
        return SECURE_CHANNEL
    return NORMAL_CHANNEL


def bind_channel_config(
    spec: ChannelSpec,
    params: ChainParams,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None = None,
) -> Channel:
    pool = list(validators)
    if spec.validator_ids is not None:
        known = {v.id: v for v in validators}
        unknown = [i for i in spec.validator_ids if i not in known]
        if unknown:
            raise ConfigurationError(f"Channel {spec.id} references unknown validators {unknown}", field=f"channels.{spec.id}")
        pool = [known[i] for i in spec.validator_ids]
    if not pool:
        raise Infeasible(f"Channel {spec.id} has an empty validator pool")

    bounds = bounds or default_bounds(params, pool)
    ranked = order_validators(pool, params)
    trace: tuple[TraceRow, ...] = ()

    if spec.mode is ChannelMode.Restricted:
        config = configure(params, spec.weights, ranked, params.min_validators, bounds)
    elif spec.mode is ChannelMode.FullyRestricted:
        if len(ranked) < params.max_validators:
            raise Infeasible(f"Channel {spec.id} needs M={params.max_validators} validators, pool has {len(ranked)}")
        config = configure(params, spec.weights, ranked, params.max_validators, bounds)
    elif spec.mode is ChannelMode.Optimized:
        result = bco(params, spec.weights, pool, bounds)
        config, trace = result.config, result.trace
    else:
        if spec.m is None or spec.n is None:
            raise ConfigurationError(f"Fixed channel {spec.id} needs both m and n", field=f"channels.{spec.id}")
        if spec.m > len(ranked):
            raise Infeasible(f"Fixed channel {spec.id} needs m={spec.m} validators, pool has {len(ranked)}")
        # Operator values are taken verbatim, even outside [v, M] x [t, chi]
        config = evaluate(params, spec.weights, ranked[: spec.m], spec.n, bounds)

    logger.info(f"Channel {spec.id} ({spec.mode.value}) bound to m={config.m} n={config.n} L={config.latency}")
    return Channel(spec.id, spec.mode, config, spec.weights, trace)


def canonical_channels(
    specs: Iterable[ChannelSpec],
    params: ChainParams,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None = None,
) -> tuple[Channel, ...]:
    """Bind every channel spec; the three canonical ids must be present."""
    ordered = sorted(specs, key=lambda s: s.id)
    ids = [s.id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"Duplicate channel ids {ids}", field="channels")
    missing = [c for c in CANONICAL_CHANNELS if c not in ids]
    if missing:
        raise ConfigurationError(f"Channel table lacks canonical channels {missing}", field="channels")
    return tuple(bind_channel_config(spec, params, validators, bounds) for spec in ordered)


def payload_transactions(
    payload: SharePayload,
    entity_id: int,
    first_id: int,
    created_at: float = 0.0,
    transaction_size: float = 500.0,
) -> list[Transaction]:
    """One transaction of size B per shared item; repeat notices stay off chain."""
    ids = itertools.count(first_id)
    if payload.kind is PayloadKind.FeaturesOnly:
        return [Transaction(next(ids), entity_id, TransactionKind.FeatureSummary, Urgency.Normal, size=transaction_size, created_at=created_at)]
    if payload.kind is PayloadKind.EmergencyNotificationWithRaw:
        notice = Transaction(
            next(ids), entity_id, TransactionKind.EmergencyNotification, Urgency.Urgent, size=transaction_size, created_at=created_at
        )
        raw = [
            Transaction(next(ids), entity_id, TransactionKind.RawData, Urgency.Urgent, size=transaction_size, created_at=created_at)
            for _ in payload.raw
        ]
        return [notice, *raw]
    return []


@dataclass(order=True)
class _Queued:
    priority: tuple[int, ...]
    sequence: int
    tx: Transaction = field(compare=False)


class IntakeQueue:
    """Priority-then-FIFO queue of transactions waiting for a block."""

    def __init__(self) -> None:
        self._heap: list[_Queued] = []
        self._sequence = itertools.count()

    def push(self, tx: Transaction, priority: tuple[int, ...] | None = None) -> None:
        heapq.heappush(self._heap, _Queued(priority or (tx.urgency.level,), next(self._sequence), tx))

    def pop(self) -> Transaction:
        return heapq.heappop(self._heap).tx

    def __len__(self) -> int:
        return len(self._heap)

    def transactions(self) -> list[Transaction]:
        return [item.tx for item in sorted(self._heap)]


def form_block(queue: IntakeQueue, channel: Channel, block_id: int = 0, now: float = 0.0) -> Block | None:
    if not len(queue):
        return None
    count = min(len(queue), channel.block_size)
    return Block(block_id, channel.id, tuple(queue.pop() for _ in range(count)), now)


class BlockchainManager:
    def __init__(
        self,
        channels: Iterable[Channel],
        entity_ranks: Mapping[int, int] | None = None,
    ) -> None:
        self.channels = {c.id: c for c in channels}
        missing = [c for c in CANONICAL_CHANNELS if c not in self.channels]
        if missing:
            raise ConfigurationError(f"Channel table lacks canonical channels {missing}", field="channels")

        self._entity_ranks = dict(entity_ranks or {})
        self.queues = {c: IntakeQueue() for c in self.channels}
        self.blocks: list[Block] = []
        self.dispatch_log: dict[int, DispatchRecord] = {}
        self._block_ids = itertools.count(1)
        self._transaction_ids = itertools.count(1)
        self.accepted = 0

    def priority_of(self, tx: Transaction) -> tuple[int, ...]:
        return (tx.urgency.level, self._entity_ranks.get(tx.entity_id, 0))

    def submit(self, tx: Transaction, now: float | None = None) -> int:
        channel_id = allocate_channel(tx, self.channels)
        enqueued_at = tx.created_at if now is None else now
        self.queues[channel_id].push(tx, self.priority_of(tx))
        self.dispatch_log[tx.id] = DispatchRecord(tx.id, tx.entity_id, channel_id, enqueued_at)
        self.accepted += 1
        logger.debug(f"Transaction {tx.id} from entity {tx.entity_id} queued on channel {channel_id}")
        return channel_id

    def submit_payload(self, payload: SharePayload, entity_id: int, now: float = 0.0, transaction_size: float = 500.0) -> list[int]:
        txs = payload_transactions(payload, entity_id, next(self._transaction_ids), now, transaction_size)
        if txs:
            self._transaction_ids = itertools.count(txs[-1].id + 1)
        return [self.submit(tx, now) for tx in txs]

    def ready(self, channel_id: int) -> bool:
        return len(self.queues[channel_id]) >= self.channels[channel_id].block_size

    def form_block(self, channel_id: int, now: float = 0.0, force: bool = False) -> Block | None:
        """Form a full block, or an underfull one when forced (flush)."""
        if not force and not self.ready(channel_id):
            return None
        block = form_block(self.queues[channel_id], self.channels[channel_id], next(self._block_ids), now)
        if block is None:
            return None
        self.blocks.append(block)
        for tx in block.transactions:
            self.dispatch_log[tx.id] = replace(self.dispatch_log[tx.id], block_id=block.id, formed_at=now)
        logger.debug(f"Block {block.id} formed on channel {channel_id} with {len(block.transactions)} transactions")
        return block

    def flush(self, now: float = 0.0) -> list[Block]:
        formed = []
        for channel_id in sorted(self.queues):
            while (block := self.form_block(channel_id, now, force=True)) is not None:
                formed.append(block)
        return formed

    def commit(self, block: Block, now: float) -> None:
        for tx in block.transactions:
            self.dispatch_log[tx.id] = replace(self.dispatch_log[tx.id], committed_at=now)

    def queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def in_blocks(self) -> int:
        return sum(len(b.transactions) for b in self.blocks)

    def snapshot(self) -> dict[int, list[int]]:
        """Read-only view of queued transaction ids per channel."""
        return {c: [tx.id for tx in q.transactions()] for c, q in self.queues.items()}
