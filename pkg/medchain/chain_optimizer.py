"""
Blockchain configuration optimization.

Latency, security and cost of a DPoS channel as functions of the validator count m and
the block size n, the weighted utility U, the closed-form block size, the greedy BCO
loop over the ranked validator list and an exhaustive grid oracle.

The utility normalizes each metric by its maximum. Everything that differentiates or
compares terms (closed-form n, the gain test) uses the same effective weights
alpha/l_m, beta*eta_m and gamma/c_m, so U, the stationary n and the gain test agree.
With unit bounds they reduce to the raw alpha*L + beta/eta + gamma*C form.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConstraintViolation, Infeasible, InvalidInput
from .helpers import clamp

WEIGHT_TOLERANCE = 1e-12

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ValidatorProfile:
    id: int
    compute: float
    price: float
    cost: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.compute) and self.compute > 0):
            raise InvalidInput(f"Validator {self.id} compute must be positive, got {self.compute}")
        if not (math.isfinite(self.price) and self.price >= 0):
            raise InvalidInput(f"Validator {self.id} price must be >= 0, got {self.price}")
        if self.cost is None:
            # Minimum admissible payment: exactly the compute bill
            object.__setattr__(self, "cost", self.price * self.compute)

    @property
    def payment(self) -> float:
        assert self.cost is not None
        return self.cost

    @property
    def bill(self) -> float:
        return self.price * self.compute

    def verification_time(self, workload: float) -> float:
        return workload / self.compute


@dataclass(frozen=True)
class ChainParams:
    transaction_size: float = 500.0
    workload: float = 100.0
    feedback_size: float = 5e5
    downlink_rate: float = 1.2e6
    uplink_rate: float = 1.3e6
    psi: float = 1e-6
    theta: float = 1.0
    q: float = 4.0
    min_validators: int = 1
    max_validators: int = 21
    min_block: int = 1
    max_block: int = 20

    def __post_init__(self) -> None:
        positive = {
            "transaction_size": self.transaction_size,
            "workload": self.workload,
            "feedback_size": self.feedback_size,
            "downlink_rate": self.downlink_rate,
            "uplink_rate": self.uplink_rate,
            "psi": self.psi,
            "theta": self.theta,
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0):
                raise InvalidInput(f"Chain parameter {name} must be positive, got {value}")
        if self.q < 2:
            raise InvalidInput(f"Network-scale exponent q must be >= 2, got {self.q}")
        if not 1 <= self.min_validators <= self.max_validators:
            raise InvalidInput(f"Need 1 <= v <= M, got v={self.min_validators} M={self.max_validators}")
        if not 1 <= self.min_block <= self.max_block:
            raise InvalidInput(f"Need 1 <= t <= chi, got t={self.min_block} chi={self.max_block}")


@dataclass(frozen=True)
class MetricWeights:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidInput(f"Metric weights must be >= 0: {self}")
        total = math.fsum((self.alpha, self.beta, self.gamma))
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise InvalidInput(f"Metric weights must sum to 1, got {total}")


@dataclass(frozen=True)
class NormalizationBounds:
    latency: float = 1.0
    security: float = 1.0
    cost: float = 1.0

    def __post_init__(self) -> None:
        if min(self.latency, self.security, self.cost) <= 0:
            raise InvalidInput(f"Normalization bounds must be positive: {self}")


@dataclass(frozen=True)
class EffectiveWeights:
    alpha: float
    beta: float
    gamma: float


@dataclass(frozen=True)
class ChainConfig:
    m: int
    n: int
    validator_ids: tuple[int, ...]
    latency: float
    security: float
    cost: float
    utility: float

    def __post_init__(self) -> None:
        if len(self.validator_ids) != self.m:
            raise InvalidInput(f"Config selects {len(self.validator_ids)} validators but m={self.m}")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    m: int
    n: int
    latency: float
    security: float
    cost: float
    utility: float
    accepted: bool


@dataclass(frozen=True)
class BlockSize:
    n: float
    stationary: bool = True


@dataclass(frozen=True)
class OptimizationResult:
    config: ChainConfig
    iterations: int = 0
    evaluations: int = 0
    trace: tuple[TraceRow, ...] = field(default_factory=tuple)


def _require_selection(selected: Sequence[ValidatorProfile], m: int) -> None:
    if not selected:
        raise InvalidInput("Latency needs at least one selected validator")
    if len(selected) != m:
        raise InvalidInput(f"Selection has {len(selected)} validators but m={m}")


def latency(params: ChainParams, selected: Sequence[ValidatorProfile], n: float, m: int) -> float:
    _require_selection(selected, m)
    bits = n * params.transaction_size
    slowest = max(v.verification_time(params.workload) for v in selected)
    return bits / params.downlink_rate + slowest + params.psi * bits * m + params.feedback_size / params.uplink_rate


def security(params: ChainParams, m: int) -> float:
    if m < 1:
        raise InvalidInput(f"Security needs m >= 1, got {m}")
    return params.theta * float(m) ** params.q


def check_payments(selected: Sequence[ValidatorProfile]) -> None:
    for v in selected:
        if v.payment < v.bill and not math.isclose(v.payment, v.bill, rel_tol=WEIGHT_TOLERANCE):
            raise ConstraintViolation(f"Validator {v.id} is paid {v.payment} < rho*x = {v.bill}")


def cost(selected: Sequence[ValidatorProfile], n: float) -> float:
    if n < 1:
        raise InvalidInput(f"Cost needs n >= 1, got {n}")
    check_payments(selected)
    return math.fsum(v.payment for v in selected) / n


def utility(
    latency_value: float,
    security_value: float,
    cost_value: float,
    weights: MetricWeights,
    bounds: NormalizationBounds,
) -> float:
    if security_value <= 0:
        raise InvalidInput(f"Utility needs a positive security level, got {security_value}")
    return (
        weights.alpha * latency_value / bounds.latency
        + weights.beta * bounds.security / security_value
        + weights.gamma * cost_value / bounds.cost
    )


def effective_weights(weights: MetricWeights, bounds: NormalizationBounds) -> EffectiveWeights:
    return EffectiveWeights(weights.alpha / bounds.latency, weights.beta * bounds.security, weights.gamma / bounds.cost)


def order_validators(validators: Sequence[ValidatorProfile], params: ChainParams) -> list[ValidatorProfile]:
    if not validators:
        raise InvalidInput("Cannot rank an empty validator pool")
    return sorted(validators, key=lambda v: (v.verification_time(params.workload), v.id))


def default_bounds(params: ChainParams, validators: Sequence[ValidatorProfile]) -> NormalizationBounds:
    """Attainable maxima over the feasible box: L at (M, chi) with the slowest validator, eta at M, C at (M, t)."""
    if not validators:
        raise InvalidInput("Cannot derive bounds from an empty validator pool")
    bits = params.max_block * params.transaction_size
    slowest = max(v.verification_time(params.workload) for v in validators)
    max_latency = (
        bits / params.downlink_rate
        + slowest
        + params.psi * bits * params.max_validators
        + params.feedback_size / params.uplink_rate
    )
    priciest = sorted((v.payment for v in validators), reverse=True)[: params.max_validators]
    max_cost = math.fsum(priciest) / params.min_block
    return NormalizationBounds(max_latency, security(params, params.max_validators), max_cost)


def closed_form_n(
    params: ChainParams,
    weights: MetricWeights,
    selected: Sequence[ValidatorProfile],
    m: int,
    bounds: NormalizationBounds | None = None,
) -> BlockSize:
    """Root of d/dn [a*L + b/eta + g*C] = 0 with m held fixed."""
    _require_selection(selected, m)
    eff = effective_weights(weights, bounds or NormalizationBounds())
    if eff.alpha == 0:
        # Latency-indifferent: the objective falls monotonically in n
        return BlockSize(float(params.max_block), stationary=False)
    per_transaction = params.transaction_size / params.downlink_rate + params.psi * params.transaction_size * m
    paid = math.fsum(v.payment for v in selected)
    return BlockSize(math.sqrt(eff.gamma * paid / (eff.alpha * per_transaction)))


def objective(
    params: ChainParams,
    weights: MetricWeights,
    selected: Sequence[ValidatorProfile],
    n: float,
    bounds: NormalizationBounds | None = None,
) -> float:
    """Continuous-n objective whose stationary point closed_form_n returns."""
    bounds = bounds or NormalizationBounds()
    m = len(selected)
    check_payments(selected)
    spend = math.fsum(v.payment for v in selected) / n
    return utility(latency(params, selected, n, m), security(params, m), spend, weights, bounds)


def integer_block_size(
    params: ChainParams,
    weights: MetricWeights,
    selected: Sequence[ValidatorProfile],
    solution: BlockSize,
    bounds: NormalizationBounds | None = None,
) -> int:
    """Better of the two integers around the continuous root, clamped to [t, chi]; ties go to the smaller n."""
    lower = clamp(math.floor(solution.n), params.min_block, params.max_block)
    upper = clamp(math.ceil(solution.n), params.min_block, params.max_block)
    if lower == upper:
        return lower
    if objective(params, weights, selected, upper, bounds) < objective(params, weights, selected, lower, bounds):
        return upper
    return lower


def evaluate(
    params: ChainParams,
    weights: MetricWeights,
    selected: Sequence[ValidatorProfile],
    n: int,
    bounds: NormalizationBounds,
) -> ChainConfig:
    m = len(selected)
    L = latency(params, selected, n, m)
    eta = security(params, m)
    C = cost(selected, n)
    return ChainConfig(m, n, tuple(v.id for v in selected), L, eta, C, utility(L, eta, C, weights, bounds))


def configure(
    params: ChainParams,
    weights: MetricWeights,
    ranked: Sequence[ValidatorProfile],
    m: int,
    bounds: NormalizationBounds,
) -> ChainConfig:
    """Take the m fastest validators and the best integer block size next to the closed-form root."""
    if m > len(ranked):
        raise Infeasible(f"Need {m} validators, pool has {len(ranked)}")
    selected = list(ranked[:m])
    n = integer_block_size(params, weights, selected, closed_form_n(params, weights, selected, m, bounds), bounds)
    return evaluate(params, weights, selected, n, bounds)


def _prepare(
    params: ChainParams,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None,
) -> tuple[list[ValidatorProfile], NormalizationBounds, int]:
    if len(validators) < params.min_validators + 1:
        raise Infeasible(f"Need at least v+1 = {params.min_validators + 1} validators, pool has {len(validators)}")
    check_payments(validators)
    ranked = order_validators(validators, params)
    top = min(params.max_validators, len(ranked))
    return ranked, bounds or default_bounds(params, validators), top


def _gain_terms(eff: EffectiveWeights, config: ChainConfig) -> tuple[float, float]:
    return eff.beta / config.security, eff.alpha * config.latency + eff.gamma * config.cost


def bco(
    params: ChainParams,
    weights: MetricWeights,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None = None,
) -> OptimizationResult:
    ranked, bounds, top = _prepare(params, validators, bounds)
    eff = effective_weights(weights, bounds)

    previous = configure(params, weights, ranked, params.min_validators, bounds)
    trace = [TraceRow(0, previous.m, previous.n, previous.latency, previous.security, previous.cost, previous.utility, True)]
    best = previous
    iterations = 0

    for m in range(params.min_validators + 1, top + 1):
        iterations += 1
        candidate = configure(params, weights, ranked, m, bounds)
        security_prev, spend_prev = _gain_terms(eff, previous)
        security_now, spend_now = _gain_terms(eff, candidate)
        accepted = not (security_prev - security_now < spend_now - spend_prev)

        trace.append(
            TraceRow(
                iterations,
                candidate.m,
                candidate.n,
                candidate.latency,
                candidate.security,
                candidate.cost,
                candidate.utility,
                accepted,
            )
        )
        logger.debug(
            f"BCO iteration {iterations}: m={m} n={candidate.n} U={candidate.utility} "
            f"security gain={security_prev - security_now} spend increase={spend_now - spend_prev}"
        )
        if not accepted:
            break
        best = previous = candidate

    logger.info(f"BCO converged to m*={best.m} n*={best.n} U={best.utility} after {iterations} iterations")
    return OptimizationResult(best, iterations=iterations, trace=tuple(trace))


def exhaustive_search(
    params: ChainParams,
    weights: MetricWeights,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None = None,
) -> OptimizationResult:
    ranked, bounds, top = _prepare(params, validators, bounds)

    ms = np.arange(params.min_validators, top + 1)
    ns = np.arange(params.min_block, params.max_block + 1, dtype=np.float64)
    times = np.array([v.verification_time(params.workload) for v in ranked[:top]])
    payments = np.array([v.payment for v in ranked[:top]])

    slowest = np.maximum.accumulate(times)[ms - 1][:, None]
    paid = np.cumsum(payments)[ms - 1][:, None]
    bits = ns[None, :] * params.transaction_size
    L = bits / params.downlink_rate + slowest + params.psi * bits * ms[:, None] + params.feedback_size / params.uplink_rate
    eta = params.theta * ms[:, None].astype(np.float64) ** params.q
    C = paid / ns[None, :]
    U = weights.alpha * L / bounds.latency + weights.beta * bounds.security / eta + weights.gamma * C / bounds.cost

    # argmin scans row-major: ties resolve to the smaller m, then the smaller n
    row, col = np.unravel_index(int(np.argmin(U)), U.shape)
    best = evaluate(params, weights, ranked[: int(ms[row])], int(ns[col]), bounds)

    logger.info(f"Exhaustive search over {U.size} grid points: m={best.m} n={best.n} U={best.utility}")
    return OptimizationResult(best, evaluations=int(U.size))


def utility_profile(
    params: ChainParams,
    weights: MetricWeights,
    validators: Sequence[ValidatorProfile],
    bounds: NormalizationBounds | None = None,
) -> list[ChainConfig]:
    """U(m, n*(m)) for every admissible m."""
    ranked, bounds, top = _prepare(params, validators, bounds)
    return [configure(params, weights, ranked, m, bounds) for m in range(params.min_validators, top + 1)]


def is_unimodal(values: Sequence[float]) -> bool:
    """True when the sequence falls (weakly) and then rises (weakly), never the other way."""
    rising = False
    for a, b in zip(values, values[1:]):
        if b > a:
            rising = True
        elif b < a and rising:
            return False
    return True
