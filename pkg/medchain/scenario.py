"""
Scenario files.

A scenario is a YAML document with named sections (chain, validators or
validator_pool, entities, queue, channels, signal, simulation). Unknown keys are
rejected, so a typo in an experiment config fails loudly instead of silently
falling back to a default.
"""

import logging
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .chain_optimizer import ChainParams, MetricWeights, ValidatorProfile
from .des_engine import PipelineScenario, SimConfig
from .errors import ConfigurationError, ReferentialError, ScenarioParseError, ScenarioValidationError
from .helpers import StreamPurpose, spawn_generator
from .ledger_channels import CANONICAL_CHANNELS, Channel, ChannelMode, ChannelSpec, canonical_channels
from .priority_queue import EntityProfile, QueueSystem, SecurityNeed, Urgency
from .signal_monitor import DEFAULT_WINDOW_LENGTH, DEFAULT_ZETA

BUNDLED_PACKAGE = "medchain.scenarios"

IdRange = tuple[int, int]

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ChainSection(_Section):
    transaction_size: float = Field(500.0, gt=0)
    workload: float = Field(100.0, gt=0)
    feedback_size: float = Field(5e5, gt=0)
    downlink_rate: float = Field(1.2e6, gt=0)
    uplink_rate: float = Field(1.3e6, gt=0)
    psi: float = Field(1e-6, gt=0)
    theta: float = Field(1.0, gt=0)
    q: float = Field(4.0, ge=2)
    min_validators: int = Field(1, ge=1)
    max_validators: int = Field(21, ge=1)
    min_block: int = Field(1, ge=1)
    max_block: int = Field(20, ge=1)

    @model_validator(mode="after")
    def _ordered_bounds(self) -> "ChainSection":
        if self.min_validators > self.max_validators:
            raise ValueError("min_validators exceeds max_validators")
        if self.min_block > self.max_block:
            raise ValueError("min_block exceeds max_block")
        return self

    def params(self) -> ChainParams:
        return ChainParams(**self.model_dump())


class ValidatorEntry(_Section):
    id: int = Field(ge=1)
    compute: float = Field(gt=0)
    price: float = Field(ge=0)
    cost: float | None = Field(None, ge=0)


def _check_range(values: tuple[float, float], name: str) -> None:
    lower, upper = values
    if not 0 <= lower <= upper:
        raise ValueError(f"{name} must satisfy 0 <= low <= high, got {list(values)}")


class ValidatorPool(_Section):
    count: int = Field(ge=1)
    seed: int = 0
    compute_range: tuple[float, float] = (20.0, 100.0)
    price_range: tuple[float, float] = (0.01, 0.1)

    @model_validator(mode="after")
    def _ranges(self) -> "ValidatorPool":
        _check_range(self.compute_range, "compute_range")
        _check_range(self.price_range, "price_range")
        if self.compute_range[0] == 0:
            raise ValueError("compute_range must be strictly positive")
        return self

    def build(self) -> list[ValidatorProfile]:
        generator = spawn_generator(self.seed, StreamPurpose.Validators)
        compute = generator.uniform(*self.compute_range, size=self.count)
        prices = generator.uniform(*self.price_range, size=self.count)
        return [ValidatorProfile(i + 1, float(x), float(p)) for i, (x, p) in enumerate(zip(compute, prices))]


def _in_ranges(entity_id: int, ranges: tuple[IdRange, ...]) -> bool:
    return any(first <= entity_id <= last for first, last in ranges)


class EntityPreset(_Section):
    """Generated entities: every rate equal (constant) or drawn from U(0, 2*rate) (uniform)."""

    preset: Literal["constant", "uniform"]
    count: int = Field(ge=1)
    rate: float = Field(gt=0)
    seed: int = 0
    urgent: tuple[IdRange, ...] = ()
    normal: tuple[IdRange, ...] = ()
    non_urgent: tuple[IdRange, ...] = ()
    high_security: tuple[IdRange, ...] = ()

    def build(self) -> tuple[EntityProfile, ...]:
        if self.preset == "constant":
            rates = [self.rate] * self.count
        else:
            generator = spawn_generator(self.seed, StreamPurpose.Entities)
            rates = [float(r) for r in generator.uniform(0.0, 2.0 * self.rate, size=self.count)]

        entities = []
        for entity_id, rate in enumerate(rates, start=1):
            if _in_ranges(entity_id, self.urgent):
                urgency = Urgency.Urgent
            elif _in_ranges(entity_id, self.non_urgent):
                urgency = Urgency.NonUrgent
            else:
                urgency = Urgency.Normal
            need = SecurityNeed.High if _in_ranges(entity_id, self.high_security) else SecurityNeed.Standard
            entities.append(EntityProfile(entity_id, rate, urgency, security_need=need))
        return tuple(entities)


class EntityEntry(_Section):
    id: int = Field(ge=1)
    arrival_rate: float = Field(ge=0)
    urgency: Urgency = Urgency.Normal
    weight: float = Field(1.0, ge=0)
    security_need: SecurityNeed = SecurityNeed.Standard

    def build(self) -> EntityProfile:
        return EntityProfile(self.id, self.arrival_rate, self.urgency, self.weight, self.security_need)


Entities = EntityPreset | tuple[EntityEntry, ...]


def _build_entities(entities: Entities) -> tuple[EntityProfile, ...]:
    if isinstance(entities, EntityPreset):
        return entities.build()
    return tuple(e.build() for e in entities)


class QueueSection(_Section):
    service_rate: float = Field(50.0, gt=0)
    service_rate_sweep: tuple[float, ...] = (45.0, 50.0, 60.0)
    coupled_channel: int | None = None


class WeightsSection(_Section):
    alpha: float = Field(ge=0)
    beta: float = Field(ge=0)
    gamma: float = Field(ge=0)

    @model_validator(mode="after")
    def _sum_to_one(self) -> "WeightsSection":
        # Same rule as MetricWeights, reported with the section path
        MetricWeights(self.alpha, self.beta, self.gamma)
        return self

    def weights(self) -> MetricWeights:
        return MetricWeights(self.alpha, self.beta, self.gamma)


class ChannelEntry(_Section):
    id: int = Field(ge=1)
    mode: ChannelMode = ChannelMode.Optimized
    weights: WeightsSection
    m: int | None = Field(None, ge=1)
    n: int | None = Field(None, ge=1)
    validator_ids: tuple[int, ...] | None = None

    @model_validator(mode="after")
    def _fixed_needs_values(self) -> "ChannelEntry":
        if self.mode is ChannelMode.Fixed and (self.m is None or self.n is None):
            raise ValueError("a fixed channel needs both m and n")
        return self

    def spec(self) -> ChannelSpec:
        return ChannelSpec(self.id, self.mode, self.weights.weights(), self.m, self.n, self.validator_ids)


class SignalSection(_Section):
    zeta: float = Field(DEFAULT_ZETA, gt=0)
    window_length: int = Field(DEFAULT_WINDOW_LENGTH, ge=2)


class SimulationSection(_Section):
    horizon: float | None = Field(200.0, gt=0)
    max_served: int | None = Field(None, ge=1)
    seed: int = 0
    warmup_fraction: float = Field(0.1, ge=0, lt=1)
    flush_timeout: float = Field(5.0, gt=0)
    verification_slots: int | None = Field(None, ge=1)
    entities: Entities | None = None

    @model_validator(mode="after")
    def _has_stop_rule(self) -> "SimulationSection":
        if self.horizon is None and self.max_served is None:
            raise ValueError("set horizon, max_served or both")
        return self


class Scenario(_Section):
    name: str
    chain: ChainSection = ChainSection()
    validators: tuple[ValidatorEntry, ...] | None = None
    validator_pool: ValidatorPool | None = None
    entities: Entities
    queue: QueueSection = QueueSection()
    channels: tuple[ChannelEntry, ...]
    signal: SignalSection = SignalSection()
    simulation: SimulationSection = SimulationSection()

    @model_validator(mode="after")
    def _one_validator_source(self) -> "Scenario":
        if (self.validators is None) == (self.validator_pool is None):
            raise ValueError("give exactly one of validators or validator_pool")
        return self

    def params(self) -> ChainParams:
        return self.chain.params()

    def validator_profiles(self) -> list[ValidatorProfile]:
        if self.validator_pool is not None:
            return self.validator_pool.build()
        assert self.validators is not None
        return [ValidatorProfile(v.id, v.compute, v.price, v.cost) for v in self.validators]

    def entity_profiles(self) -> tuple[EntityProfile, ...]:
        return _build_entities(self.entities)

    def queue_system(self, service_rate: float | None = None) -> QueueSystem:
        return QueueSystem(self.entity_profiles(), service_rate or self.queue.service_rate)

    def channel_specs(self) -> list[ChannelSpec]:
        return [c.spec() for c in self.channels]

    def channel_entry(self, channel_id: int) -> ChannelEntry:
        for entry in self.channels:
            if entry.id == channel_id:
                return entry
        raise ReferentialError(f"Scenario {self.name} has no channel {channel_id}", field="channels")

    def bind_channels(self) -> tuple[Channel, ...]:
        return canonical_channels(self.channel_specs(), self.params(), self.validator_profiles())

    def sim_config(self, seed: int | None = None, record_events: bool = False) -> SimConfig:
        sim = self.simulation
        return SimConfig(
            horizon=sim.horizon,
            max_served=sim.max_served,
            seed=sim.seed if seed is None else seed,
            warmup_fraction=sim.warmup_fraction,
            record_events=record_events,
            flush_timeout=sim.flush_timeout,
        )

    def pipeline(self, channels: tuple[Channel, ...] | None = None) -> PipelineScenario:
        entities = self.entities if self.simulation.entities is None else self.simulation.entities
        system = QueueSystem(_build_entities(entities), self.queue.service_rate)
        return PipelineScenario(
            system,
            channels if channels is not None else self.bind_channels(),
            self.chain.transaction_size,
            self.simulation.verification_slots,
        )


def _check_references(scenario: Scenario) -> None:
    validator_ids = [v.id for v in scenario.validator_profiles()]
    if len(set(validator_ids)) != len(validator_ids):
        raise ReferentialError(f"Duplicate validator ids {sorted(validator_ids)}", field="validators")

    channel_ids = [c.id for c in scenario.channels]
    if len(set(channel_ids)) != len(channel_ids):
        raise ReferentialError(f"Duplicate channel ids {channel_ids}", field="channels")
    missing = [c for c in CANONICAL_CHANNELS if c not in channel_ids]
    if missing:
        raise ReferentialError(f"Canonical channels {missing} are not configured", field="channels")

    known = set(validator_ids)
    for index, channel in enumerate(scenario.channels):
        unknown = [i for i in channel.validator_ids or () if i not in known]
        if unknown:
            raise ReferentialError(
                f"Channel {channel.id} references unknown validators {unknown}",
                field=f"channels.{index}.validator_ids",
            )

    coupled = scenario.queue.coupled_channel
    if coupled is not None and coupled not in channel_ids:
        raise ReferentialError(f"Coupled channel {coupled} is not configured", field="queue.coupled_channel")

    for section, entities in (("entities", scenario.entities), ("simulation.entities", scenario.simulation.entities)):
        if isinstance(entities, tuple):
            ids = [e.id for e in entities]
            if len(set(ids)) != len(ids):
                raise ReferentialError(f"Duplicate entity ids {sorted(ids)}", field=section)


def _field_path(loc: tuple[int | str, ...]) -> str:
    return ".".join(str(part) for part in loc)


def parse_scenario(document: Any, source: str = "<scenario>") -> Scenario:
    if not isinstance(document, dict):
        raise ScenarioValidationError(f"{source}: a scenario must be a mapping of named sections", field="")
    try:
        scenario = Scenario.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        path = _field_path(first["loc"])
        raise ScenarioValidationError(f"{source}: {path}: {first['msg']}", field=path) from e
    _check_references(scenario)
    return scenario


def bundled_scenario_path(name: str) -> Path:
    resource = resources.files(BUNDLED_PACKAGE).joinpath(f"{name}.yaml")
    return Path(str(resource))


def resolve_scenario_path(path: str | Path) -> Path:
    """A file path, or the name of a bundled scenario such as paper_default."""
    candidate = Path(path)
    if candidate.exists():
        return candidate
    if candidate.suffix == "" and candidate.parent == Path("."):
        bundled = bundled_scenario_path(candidate.name)
        if bundled.exists():
            return bundled
    raise ConfigurationError(f"Scenario file {path} does not exist")


def load_scenario(path: str | Path) -> Scenario:
    source = resolve_scenario_path(path)
    text = source.read_text(encoding="utf-8")
    try:
        document = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ScenarioParseError(f"{source}: {e.problem}", line=line) from e
    except yaml.YAMLError as e:
        raise ScenarioParseError(f"{source}: {e}") from e

    scenario = parse_scenario(document, str(source))
    logger.info(f"Loaded scenario {scenario.name} from {source}")
    return scenario


def dump_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(scenario.model_dump(mode="json"), f, sort_keys=False)
