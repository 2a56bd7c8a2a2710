"""
Seeded discrete-event simulation on simpy.

run_queue_sim checks the closed-form sojourn times: Poisson arrivals per entity,
exponential work, one server under preemptive-resume priority (or FIFO when no order
is given). run_pipeline_sim runs the whole BM flow: service, channel allocation, block
formation by size or flush timeout, verification for the channel's L (optionally with a
limited number of blocks in flight per channel), then commit.
"""

import asyncio
import heapq
import logging
import math
import threading
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Coroutine, Iterable, Sequence, TypeVar

import numpy as np
import simpy
from scipy import stats

from .errors import ConfigurationError, InvalidInput, SimulationError
from .helpers import ExponentialStream, StreamPurpose, spawn_generator
from .ledger_channels import (
    BlockchainManager,
    Block,
    Channel,
    DispatchRecord,
    Transaction,
    TransactionKind,
)
from .priority_queue import (
    Discipline,
    PriorityOrder,
    QueueSystem,
    SecurityNeed,
    Urgency,
    _require_stable,
    stability_margin,
)

BATCHES = 20
CONFIDENCE = 0.95

T = TypeVar("T")

logger = logging.getLogger(__name__)


class EventKind(Enum):
    Arrival = "arrival"
    ServiceStart = "service_start"
    Preemption = "preemption"
    ServiceComplete = "service_complete"
    BlockFormed = "block_formed"
    BlockCommitted = "block_committed"

    @property
    def precedence(self) -> int:
        # Same-instant order: a cause is always logged before its effects, so a
        # preempted job leaves the server before the preempting job starts
        return _PRECEDENCE[self]


_PRECEDENCE = {
    EventKind.Arrival: 0,
    EventKind.ServiceComplete: 1,
    EventKind.Preemption: 2,
    EventKind.ServiceStart: 3,
    EventKind.BlockFormed: 4,
    EventKind.BlockCommitted: 5,
}


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    subject: int
    # Entity of a transaction event; 0 for block events
    entity_id: int = 0

    def sort_key(self) -> tuple[float, int, int]:
        return self.time, self.kind.precedence, self.subject


@dataclass(frozen=True)
class SimConfig:
    horizon: float | None = None
    max_served: int | None = None
    seed: int = 0
    warmup_fraction: float = 0.1
    record_events: bool = False
    flush_timeout: float = 5.0

    def __post_init__(self) -> None:
        if self.horizon is None and self.max_served is None:
            raise InvalidInput("Simulation needs a time horizon or a served-transaction cap")
        if self.horizon is not None and not self.horizon > 0:
            raise InvalidInput(f"Horizon must be positive, got {self.horizon}")
        if self.max_served is not None and self.max_served < 1:
            raise InvalidInput(f"Served cap must be >= 1, got {self.max_served}")
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidInput(f"Warmup fraction must be in [0, 1), got {self.warmup_fraction}")
        if not self.flush_timeout > 0:
            raise InvalidInput(f"Flush timeout must be positive, got {self.flush_timeout}")


@dataclass(frozen=True)
class EntitySummary:
    entity_id: int
    samples: int
    mean: float
    half_width: float


@dataclass(frozen=True)
class ChannelSummary:
    channel_id: int
    blocks: int
    transactions: int
    mean: float
    p50: float
    p95: float
    max: float


@dataclass(frozen=True)
class SimReport:
    discipline: Discipline
    entities: dict[int, EntitySummary]
    channels: dict[int, ChannelSummary] = field(default_factory=dict)
    events: tuple[SimEvent, ...] = ()
    served: int = 0
    end_time: float = 0.0


@dataclass(frozen=True)
class PipelineScenario:
    system: QueueSystem
    channels: tuple[Channel, ...]
    transaction_size: float = 500.0
    # Blocks verified concurrently per channel; None pipelines every formed block
    verification_slots: int | None = None


@dataclass(frozen=True)
class TraceArrival:
    time: float
    entity_id: int
    work: float


@dataclass(frozen=True)
class PipelineResult:
    report: SimReport
    dispatch_log: tuple[DispatchRecord, ...]


def summarize(entity_id: int, samples: Sequence[float], batches: int = BATCHES) -> EntitySummary:
    """Mean and batch-means confidence half-width."""
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        return EntitySummary(entity_id, 0, math.nan, math.nan)
    mean = float(np.mean(values))
    if values.size < batches:
        return EntitySummary(entity_id, int(values.size), mean, math.nan)
    batch_means = np.array([b.mean() for b in np.array_split(values, batches)])
    quantile = stats.t.ppf(0.5 + CONFIDENCE / 2, batches - 1)
    half_width = float(quantile * batch_means.std(ddof=1) / math.sqrt(batches))
    return EntitySummary(entity_id, int(values.size), mean, half_width)


def summarize_channel(channel_id: int, blocks: int, latencies: Sequence[float]) -> ChannelSummary:
    values = np.asarray(latencies, dtype=np.float64)
    if values.size == 0:
        return ChannelSummary(channel_id, blocks, 0, math.nan, math.nan, math.nan, math.nan)
    p50, p95 = np.percentile(values, [50, 95])
    return ChannelSummary(channel_id, blocks, int(values.size), float(values.mean()), float(p50), float(p95), float(values.max()))


class _Job:
    __slots__ = ("id", "entity_id", "rank", "arrival", "remaining", "payload")

    def __init__(self, job_id: int, entity_id: int, rank: int, arrival: float, work: float, payload: Any = None) -> None:
        self.id = job_id
        self.entity_id = entity_id
        self.rank = rank
        self.arrival = arrival
        self.remaining = work
        self.payload = payload


class _EventLog:
    def __init__(self, enabled: bool) -> None:
        self.enabled = enabled
        self._events: list[SimEvent] = []

    def __call__(self, time: float, kind: EventKind, subject: int, entity_id: int = 0) -> None:
        if self.enabled:
            self._events.append(SimEvent(time, kind, subject, entity_id))

    def ordered(self) -> tuple[SimEvent, ...]:
        return tuple(sorted(self._events, key=SimEvent.sort_key))


class PreemptiveServer:
    """
    Single server, lower rank served first, FIFO within a rank.

    A preempted job keeps its remaining work and its original arrival sequence, so it
    resumes ahead of later arrivals of its own rank.
    """

    def __init__(self, env: simpy.Environment, on_complete: Callable[[_Job], None], log: _EventLog) -> None:
        self.env = env
        self._on_complete = on_complete
        self._log = log
        self._heap: list[tuple[int, int, _Job]] = []
        self._current: _Job | None = None
        self._interrupting = False
        self._wakeup = env.event()
        self.process = env.process(self._run())

    @property
    def busy(self) -> bool:
        return self._current is not None

    @property
    def waiting(self) -> int:
        return len(self._heap)

    def offer(self, job: _Job) -> None:
        heapq.heappush(self._heap, (job.rank, job.id, job))
        if self._current is None:
            if not self._wakeup.triggered:
                self._wakeup.succeed()
        elif job.rank < self._current.rank and not self._interrupting:
            self._interrupting = True
            self.process.interrupt(job.id)

    def _finish(self, job: _Job) -> None:
        job.remaining = 0.0
        self._log(self.env.now, EventKind.ServiceComplete, job.id, job.entity_id)
        self._on_complete(job)

    def _run(self) -> Any:
        while True:
            if not self._heap:
                self._wakeup = self.env.event()
                yield self._wakeup
                continue

            _, _, job = heapq.heappop(self._heap)
            self._current = job
            started = self.env.now
            self._log(started, EventKind.ServiceStart, job.id, job.entity_id)
            try:
                yield self.env.timeout(job.remaining)
            except simpy.Interrupt:
                self._interrupting = False
                self._current = None
                job.remaining -= self.env.now - started
                self._log(self.env.now, EventKind.Preemption, job.id, job.entity_id)
                if job.remaining <= 0:
                    self._finish(job)
                else:
                    heapq.heappush(self._heap, (job.rank, job.id, job))
                continue

            self._current = None
            self._finish(job)


def _ranks(system: QueueSystem, order: PriorityOrder | None) -> dict[int, int]:
    if order is None:
        return {e.id: 1 for e in system.entities}
    if sorted(order.ranked) != sorted(e.id for e in system.entities):
        raise InvalidInput("Priority order is not a permutation of the system's entity ids")
    return order.ranks()


def _streams(system: QueueSystem, seed: int) -> dict[int, tuple[ExponentialStream, ExponentialStream]]:
    return {
        e.id: (
            ExponentialStream(spawn_generator(seed, e.id, StreamPurpose.Interarrival), e.arrival_rate),
            ExponentialStream(spawn_generator(seed, e.id, StreamPurpose.Service), system.service_rate),
        )
        for e in system.entities
        if e.arrival_rate > 0
    }


def run_queue_sim(system: QueueSystem, order: PriorityOrder | None, cfg: SimConfig) -> SimReport:
    """Preemptive-resume priority by the given order; FIFO equal priority when order is None."""
    _require_stable(system)

    env = simpy.Environment()
    log = _EventLog(cfg.record_events)
    ranks = _ranks(system, order)
    sojourns: dict[int, list[float]] = {e.id: [] for e in system.entities}
    done = env.event()
    served = 0
    skip = int(cfg.warmup_fraction * cfg.max_served) if cfg.max_served is not None else 0
    cutoff = cfg.warmup_fraction * cfg.horizon if cfg.max_served is None and cfg.horizon is not None else 0.0
    job_ids = iter(range(1, 2**62))

    def complete(job: _Job) -> None:
        nonlocal served
        served += 1
        if served > skip and job.arrival >= cutoff:
            sojourns[job.entity_id].append(env.now - job.arrival)
        if cfg.max_served is not None and served >= cfg.max_served and not done.triggered:
            done.succeed()

    server = PreemptiveServer(env, complete, log)

    def arrivals(entity_id: int, interarrival: ExponentialStream, work: ExponentialStream) -> Any:
        while True:
            yield env.timeout(interarrival())
            job = _Job(next(job_ids), entity_id, ranks[entity_id], env.now, work())
            log(env.now, EventKind.Arrival, job.id, entity_id)
            server.offer(job)

    for entity_id, (interarrival, work) in _streams(system, cfg.seed).items():
        env.process(arrivals(entity_id, interarrival, work))

    discipline = Discipline.EqualPriority if order is None else Discipline.UrgencyPriority
    logger.info(
        f"Queue simulation ({discipline.value}) of {len(system.entities)} entities, mu={system.service_rate}, "
        f"seed={cfg.seed}"
    )
    if cfg.max_served is not None:
        until: Any = done if cfg.horizon is None else env.any_of([done, env.timeout(cfg.horizon)])
    else:
        until = cfg.horizon
    env.run(until=until)

    logger.info(f"Queue simulation finished at t={env.now} after {served} served transactions")
    return SimReport(
        discipline,
        {i: summarize(i, s) for i, s in sorted(sojourns.items())},
        events=log.ordered(),
        served=served,
        end_time=float(env.now),
    )


def transaction_kind(urgency: Urgency, security_need: SecurityNeed) -> TransactionKind:
    if urgency is Urgency.Urgent:
        return TransactionKind.EmergencyNotification
    if security_need is SecurityNeed.High:
        return TransactionKind.LegalDocument
    return TransactionKind.FeatureSummary


class _Pipeline:
    def __init__(self, scenario: PipelineScenario, cfg: SimConfig, ranks: dict[int, int]) -> None:
        self.env = simpy.Environment()
        self.cfg = cfg
        self.scenario = scenario
        self.ranks = ranks
        self.log = _EventLog(cfg.record_events)
        self.bm = BlockchainManager(scenario.channels, entity_ranks=ranks)
        slots = scenario.verification_slots
        self.verifiers = {c: simpy.Resource(self.env, capacity=slots) for c in self.bm.channels} if slots else {}
        self.generation = {c: 0 for c in self.bm.channels}
        self.server = PreemptiveServer(self.env, self._served, self.log)
        self.end_to_end: dict[int, list[float]] = {e.id: [] for e in scenario.system.entities}
        self.commit_latency: dict[int, list[float]] = {c: [] for c in self.bm.channels}
        self.block_count = {c: 0 for c in self.bm.channels}
        self.arrived = 0
        self.committed = 0
        self._transactions: dict[int, Transaction] = {}

    def _counted(self, tx: Transaction) -> bool:
        cfg = self.cfg
        if cfg.max_served is not None:
            return tx.id > int(cfg.warmup_fraction * cfg.max_served)
        assert cfg.horizon is not None
        return tx.created_at >= cfg.warmup_fraction * cfg.horizon

    def _accepting(self) -> bool:
        if self.cfg.max_served is not None and self.arrived >= self.cfg.max_served:
            return False
        return self.cfg.horizon is None or self.env.now <= self.cfg.horizon

    def arrivals(self, entity_id: int, interarrival: ExponentialStream, work: ExponentialStream) -> Any:
        while True:
            yield self.env.timeout(interarrival())
            if not self._accepting():
                return
            self._arrive(entity_id, work())

    def replay(self, trace: Sequence[TraceArrival]) -> Any:
        for arrival in sorted(trace, key=lambda a: a.time):
            yield self.env.timeout(arrival.time - self.env.now)
            if not self._accepting():
                return
            self._arrive(arrival.entity_id, arrival.work)

    def _arrive(self, entity_id: int, work: float) -> None:
        entity = self.scenario.system.entity(entity_id)
        self.arrived += 1
        tx = Transaction(
            self.arrived,
            entity_id,
            transaction_kind(entity.urgency, entity.security_need),
            entity.urgency,
            entity.security_need,
            self.scenario.transaction_size,
            self.env.now,
        )
        self._transactions[tx.id] = tx
        self.log(self.env.now, EventKind.Arrival, tx.id, entity_id)
        self.server.offer(_Job(tx.id, entity_id, self.ranks[entity_id], self.env.now, work, tx))

    def _served(self, job: _Job) -> None:
        tx: Transaction = job.payload
        channel_id = self.bm.submit(tx, self.env.now)
        if self.bm.ready(channel_id):
            self._form(channel_id, force=False)
        elif len(self.bm.queues[channel_id]) == 1:
            self.env.process(self._flush_timer(channel_id, self.generation[channel_id]))

    def _form(self, channel_id: int, force: bool) -> None:
        block = self.bm.form_block(channel_id, self.env.now, force=force)
        if block is None:
            return
        self.generation[channel_id] += 1
        self.block_count[channel_id] += 1
        self.log(self.env.now, EventKind.BlockFormed, block.id)
        self.env.process(self._verify(block))
        if len(self.bm.queues[channel_id]):
            self.env.process(self._flush_timer(channel_id, self.generation[channel_id]))

    def _flush_timer(self, channel_id: int, generation: int) -> Any:
        yield self.env.timeout(self.cfg.flush_timeout)
        if self.generation[channel_id] == generation:
            self._form(channel_id, force=True)

    def _verify(self, block: Block) -> Any:
        channel = self.bm.channels[block.channel_id]
        if self.verifiers:
            with self.verifiers[block.channel_id].request() as slot:
                yield slot
                yield self.env.timeout(channel.verification_latency)
        else:
            yield self.env.timeout(channel.verification_latency)
        now = self.env.now
        self.bm.commit(block, now)
        self.log(now, EventKind.BlockCommitted, block.id)
        for tx in block.transactions:
            self.committed += 1
            if not self._counted(tx):
                continue
            record = self.bm.dispatch_log[tx.id]
            self.end_to_end[tx.entity_id].append(now - tx.created_at)
            self.commit_latency[block.channel_id].append(now - record.enqueued_at)

    def run(self, trace: Sequence[TraceArrival] | None = None) -> None:
        if trace is None:
            for entity_id, (interarrival, work) in _streams(self.scenario.system, self.cfg.seed).items():
                self.env.process(self.arrivals(entity_id, interarrival, work))
        else:
            self.env.process(self.replay(trace))
        # Arrivals stop at the horizon; the run drains every queue and verifier
        self.env.run()

        if self.committed != self.arrived or self.bm.queued():
            raise SimulationError(
                f"Pipeline drained with {self.arrived} arrivals but {self.committed} commits, "
                f"{self.bm.queued()} still queued"
            )


def _check_pipeline(scenario: PipelineScenario) -> None:
    if not scenario.channels:
        raise ConfigurationError("Pipeline scenario has no channels", field="channels")
    ids = [c.id for c in scenario.channels]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"Duplicate channel ids {sorted(ids)}", field="channels")
    for channel in scenario.channels:
        if channel.block_size < 1:
            raise ConfigurationError(f"Channel {channel.id} block size must be >= 1", field=f"channels.{channel.id}.n")
    if not scenario.transaction_size > 0:
        raise ConfigurationError("Transaction size must be positive", field="chain.transaction_size")
    if scenario.verification_slots is not None and scenario.verification_slots < 1:
        raise ConfigurationError("Verification slots must be >= 1", field="simulation.verification_slots")


def _check_trace(system: QueueSystem, trace: Sequence[TraceArrival]) -> None:
    known = {e.id for e in system.entities}
    for arrival in trace:
        if arrival.entity_id not in known:
            raise InvalidInput(f"Trace arrival at t={arrival.time} names unknown entity {arrival.entity_id}")
        if not (math.isfinite(arrival.time) and arrival.time >= 0):
            raise InvalidInput(f"Trace arrival times must be >= 0, got {arrival.time}")
        if not (math.isfinite(arrival.work) and arrival.work > 0):
            raise InvalidInput(f"Trace service demands must be positive, got {arrival.work}")


def run_pipeline_sim(
    scenario: PipelineScenario,
    cfg: SimConfig,
    order: PriorityOrder | None = None,
    trace: Sequence[TraceArrival] | None = None,
) -> PipelineResult:
    """
    End-to-end flow; order=None serves the BM queue FIFO with equal priorities.

    A trace replaces the seeded Poisson arrivals and exponential work with fixed
    arrival times and service demands.
    """
    _check_pipeline(scenario)
    if trace is not None:
        _check_trace(scenario.system, trace)
    margin = stability_margin(scenario.system)
    if margin <= 0:
        logger.warning(f"BM queue is unstable (margin {margin}); results depend on the horizon")

    pipeline = _Pipeline(scenario, cfg, _ranks(scenario.system, order))
    discipline = Discipline.EqualPriority if order is None else Discipline.UrgencyPriority
    logger.info(f"Pipeline simulation ({discipline.value}) over {len(scenario.channels)} channels, seed={cfg.seed}")
    pipeline.run(trace)
    logger.info(
        f"Pipeline simulation finished at t={pipeline.env.now}: {pipeline.arrived} transactions, "
        f"{len(pipeline.bm.blocks)} blocks"
    )

    report = SimReport(
        discipline,
        {i: summarize(i, s) for i, s in sorted(pipeline.end_to_end.items())},
        {c: summarize_channel(c, pipeline.block_count[c], v) for c, v in sorted(pipeline.commit_latency.items())},
        events=pipeline.log.ordered(),
        served=pipeline.committed,
        end_time=float(pipeline.env.now),
    )
    log = tuple(pipeline.bm.dispatch_log[i] for i in sorted(pipeline.bm.dispatch_log))
    return PipelineResult(report, log)


def queue_replication(system: QueueSystem, order: PriorityOrder | None, cfg: SimConfig, seed: int) -> SimReport:
    """run_queue_sim with the seed replaced; a module-level target that process pools can pickle."""
    return run_queue_sim(system, order, replace(cfg, seed=seed))


async def asweep_seeds(run: Callable[[int], T], seeds: Iterable[int], executor: Executor | None = None) -> list[T]:
    """
    Independent replications, results in seed order.

    Without an executor each replication runs in a thread. CPU-bound sweeps should pass a
    ProcessPoolExecutor together with a picklable run, such as a partial of queue_replication.
    """
    seed_list = list(seeds)
    if not seed_list:
        return []

    logger.info(f"Starting seed sweep of {len(seed_list)} replications")
    if executor is None:
        results = await asyncio.gather(*(asyncio.to_thread(run, seed) for seed in seed_list))
    else:
        loop = asyncio.get_running_loop()
        results = await asyncio.gather(*(loop.run_in_executor(executor, run, seed) for seed in seed_list))
    logger.info(f"Completed seed sweep of {len(results)} replications")
    return list(results)


def sweep_seeds(run: Callable[[int], T], seeds: Iterable[int], executor: Executor | None = None) -> list[T]:
    return _run_async(lambda: asweep_seeds(run, seeds, executor))


def _run_async(coro_factory: Callable[[], Coroutine[Any, Any, T]]) -> T:
    """Run a coroutine from sync code, in a private thread when a loop is already running."""
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(coro_factory())

    outcome: dict[str, Any] = {}

    def run_in_thread() -> None:
        try:
            outcome["result"] = asyncio.run(coro_factory())
        except Exception as e:
            outcome["error"] = e

    thread = threading.Thread(target=run_in_thread, daemon=True)
    thread.start()
    thread.join()
    if "error" in outcome:
        raise outcome["error"]
    return outcome["result"]  # type: ignore[no-any-return]
