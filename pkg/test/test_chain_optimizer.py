import logging

import numpy as np
import pytest

from medchain.chain_optimizer import (
    bco,
    ChainParams,
    closed_form_n,
    cost,
    default_bounds,
    effective_weights,
    evaluate,
    exhaustive_search,
    integer_block_size,
    is_unimodal,
    latency,
    MetricWeights,
    NormalizationBounds,
    objective,
    order_validators,
    security,
    utility,
    utility_profile,
    ValidatorProfile,
)
from medchain.errors import ConstraintViolation, Infeasible, InvalidInput

logger = logging.getLogger(__name__)

URGENT = MetricWeights(0.98, 0.01, 0.01)
SECURE = MetricWeights(0.1, 0.8, 0.1)
BALANCED = MetricWeights(0.34, 0.33, 0.33)


def _random_pool(generator: np.random.Generator, size: int) -> list[ValidatorProfile]:
    compute = generator.uniform(10, 100, size)
    prices = generator.uniform(0.001, 0.1, size)
    return [ValidatorProfile(i + 1, float(x), float(p)) for i, (x, p) in enumerate(zip(compute, prices))]


def _overpaid_pool(generator: np.random.Generator, size: int) -> list[ValidatorProfile]:
    pool = _random_pool(generator, size)
    return [ValidatorProfile(v.id, v.compute, v.price, cost=v.bill * float(generator.uniform(1.0, 5.0))) for v in pool]


def _random_params(generator: np.random.Generator, max_validators: int) -> ChainParams:
    return ChainParams(
        transaction_size=float(generator.uniform(100, 1000)),
        workload=float(generator.uniform(10, 200)),
        downlink_rate=float(generator.uniform(1e5, 1e7)),
        uplink_rate=float(generator.uniform(1e5, 1e7)),
        psi=float(generator.uniform(1e-8, 1e-5)),
        max_validators=max_validators,
    )


def _random_weights(generator: np.random.Generator) -> MetricWeights:
    alpha, beta = generator.dirichlet([1.0, 1.0, 1.0])[:2]
    return MetricWeights(float(alpha), float(beta), max(0.0, 1.0 - float(alpha) - float(beta)))


def test_latency_default_parameters(params: ChainParams) -> None:
    """Hand evaluation with one validator of compute 50 and n=10."""
    value = latency(params, [ValidatorProfile(1, 50.0, 0.05)], 10, 1)
    assert value == pytest.approx(5000 / 1.2e6 + 2.0 + 1e-6 * 5000 + 5e5 / 1.3e6, rel=1e-12)
    assert value == pytest.approx(2.39378, abs=1e-5)


def test_latency_uses_slowest_selected(params: ChainParams) -> None:
    """Replacing the slowest validator with a slower one raises L."""
    fast = [ValidatorProfile(1, 100.0, 0.01), ValidatorProfile(2, 50.0, 0.01)]
    slow = [ValidatorProfile(1, 100.0, 0.01), ValidatorProfile(3, 40.0, 0.01)]
    assert latency(params, slow, 5, 2) > latency(params, fast, 5, 2)


def test_latency_rejects_empty_or_mismatched_selection(params: ChainParams) -> None:
    """Test the selection must be non-empty and of size m."""
    with pytest.raises(InvalidInput):
        latency(params, [], 1, 0)
    with pytest.raises(InvalidInput):
        latency(params, [ValidatorProfile(1, 50.0, 0.05)], 1, 2)


def test_security_power_law(params: ChainParams) -> None:
    """Test eta = theta * m^q."""
    assert security(params, 1) == 1.0
    assert security(params, 8) == 4096.0
    assert security(params, 10) / security(params, 5) == pytest.approx(2**4)


def test_cost_examples() -> None:
    """Test cost per transaction."""
    validator = ValidatorProfile(1, 10.0, 1.0, cost=10.0)
    assert cost([validator], 10) == 1.0
    assert cost([validator], 20) == pytest.approx(cost([validator], 10) / 2)


def test_cost_binding_payment_is_accepted() -> None:
    """A payment equal to rho*x satisfies the constraint."""
    validator = ValidatorProfile(1, 30.0, 0.07)
    assert validator.payment == pytest.approx(validator.bill)
    assert cost([validator], 1) == pytest.approx(2.1)


def test_cost_underpaid_validator() -> None:
    """A payment below rho*x violates the constraint."""
    with pytest.raises(ConstraintViolation):
        cost([ValidatorProfile(1, 10.0, 1.0, cost=5.0)], 1)


def test_cost_rejects_empty_block() -> None:
    """Test n must be at least 1."""
    with pytest.raises(InvalidInput):
        cost([ValidatorProfile(1, 10.0, 1.0)], 0)


def test_utility_examples() -> None:
    """U is 1 at the normalization point and scales linearly in L."""
    bounds = NormalizationBounds(4.0, 100.0, 2.0)
    assert utility(4.0, 100.0, 2.0, BALANCED, bounds) == pytest.approx(1.0, rel=1e-12)
    assert utility(2.0, 100.0, 2.0, MetricWeights(1.0, 0.0, 0.0), bounds) == pytest.approx(0.5)
    assert utility(4.0, 200.0, 2.0, BALANCED, bounds) < utility(4.0, 100.0, 2.0, BALANCED, bounds)
    with pytest.raises(InvalidInput):
        utility(1.0, 0.0, 1.0, BALANCED, bounds)


@pytest.mark.parametrize("weights", [(0.5, 0.3, 0.3), (0.5, 0.5, 0.1), (-0.1, 0.6, 0.5)])
def test_metric_weights_must_sum_to_one(weights: tuple[float, float, float]) -> None:
    """Test invalid weight triples."""
    with pytest.raises(InvalidInput):
        MetricWeights(*weights)


def test_default_bounds(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """Bounds are the attainable maxima over the feasible box."""
    bounds = default_bounds(params, validators)
    assert bounds.latency == pytest.approx(1e4 / 1.2e6 + 5.0 + 0.21 + 5e5 / 1.3e6, rel=1e-12)
    assert bounds.security == 21.0**4
    assert bounds.cost == pytest.approx(67.95, rel=1e-12)


def test_effective_weights_reduce_to_raw_with_unit_bounds() -> None:
    """Unit bounds leave the weights unchanged."""
    eff = effective_weights(BALANCED, NormalizationBounds())
    assert (eff.alpha, eff.beta, eff.gamma) == (0.34, 0.33, 0.33)


def test_closed_form_n_unit_ratio(params: ChainParams) -> None:
    """gamma * sum of payments equal to alpha * (B/rd + psi*B*m) gives n=1."""
    per_transaction = params.transaction_size / params.downlink_rate + params.psi * params.transaction_size
    selected = [ValidatorProfile(1, 1.0, per_transaction)]
    solution = closed_form_n(params, MetricWeights(0.5, 0.0, 0.5), selected, 1)
    assert solution.n == pytest.approx(1.0, rel=1e-12)
    assert solution.stationary


def test_closed_form_n_cost_indifferent(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """gamma=0 puts the root at 0, clamped to t."""
    solution = closed_form_n(params, MetricWeights(0.5, 0.5, 0.0), validators[:3], 3)
    assert solution.n == 0.0
    assert integer_block_size(params, MetricWeights(0.5, 0.5, 0.0), validators[:3], solution) == params.min_block


def test_closed_form_n_latency_indifferent(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """alpha=0 has no interior point; the upper clamp is returned with a flag."""
    solution = closed_form_n(params, MetricWeights(0.0, 0.5, 0.5), validators[:3], 3)
    assert solution.n == params.max_block
    assert not solution.stationary


def test_closed_form_n_is_stationary() -> None:
    """Marginal latency and marginal cost cancel at the returned n, including overpaid validators."""
    generator = np.random.default_rng(2024)
    for trial in range(200):
        size = int(generator.integers(1, 11))
        pool = _random_pool(generator, size) if trial % 2 else _overpaid_pool(generator, size)
        params = _random_params(generator, size)
        weights = _random_weights(generator)
        bounds = default_bounds(params, pool)
        eff = effective_weights(weights, bounds)

        n = closed_form_n(params, weights, pool, size, bounds).n
        if n == 0.0:
            continue
        h = 1e-3 * n
        latency_slope = eff.alpha * (latency(params, pool, n + h, size) - latency(params, pool, n - h, size))
        paid = sum(v.payment for v in pool)
        cost_slope = eff.gamma * (paid / (n + h) - paid / (n - h))
        assert latency_slope == pytest.approx(-cost_slope, rel=1e-4)


def test_closed_form_n_with_overpaid_validators() -> None:
    """Payments above rho*x move the root; the integer pick is the grid argmin of the objective."""
    params = ChainParams(max_validators=4, max_block=200)
    pool = [ValidatorProfile(i, 50.0 + 10 * i, 0.05, cost=(0.05 * (50.0 + 10 * i)) * 4) for i in range(1, 5)]
    weights = MetricWeights(0.5, 0.2, 0.3)
    bounds = default_bounds(params, pool)

    solution = closed_form_n(params, weights, pool, 4, bounds)
    at_bill = closed_form_n(params, weights, [ValidatorProfile(v.id, v.compute, v.price) for v in pool], 4, bounds)
    assert solution.n == pytest.approx(2.0 * at_bill.n, rel=1e-12)

    values = [objective(params, weights, pool, n, bounds) for n in range(1, 201)]
    assert integer_block_size(params, weights, pool, solution, bounds) == int(np.argmin(values)) + 1


def test_order_validators_by_verification_time(params: ChainParams) -> None:
    """Faster validators come first, ties by id."""
    pool = [ValidatorProfile(1, 10.0, 0.1), ValidatorProfile(2, 50.0, 0.1), ValidatorProfile(3, 20.0, 0.1)]
    assert [v.id for v in order_validators(pool, params)] == [2, 3, 1]

    equal = [ValidatorProfile(i, 30.0, 0.1) for i in (5, 2, 9)]
    assert [v.id for v in order_validators(equal, params)] == [2, 5, 9]


def test_bco_urgent_channel(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """Latency-dominant weights stop at the eight fast validators."""
    result = bco(params, URGENT, validators)
    assert (result.config.m, result.config.n) == (8, 3)
    assert result.config.utility == pytest.approx(0.746062946199966, rel=1e-9)
    assert result.config.latency == pytest.approx(1.534229, rel=1e-6)
    assert result.config.security == 4096.0
    assert result.config.validator_ids == tuple(range(1, 9))
    assert len(result.trace) == result.iterations + 1
    assert not result.trace[-1].accepted


def test_bco_secure_channel_uses_every_validator(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """Security-dominant weights run the loop to M."""
    result = bco(params, SECURE, validators)
    assert (result.config.m, result.config.n) == (21, 20)
    assert result.config.security == 21.0**4
    assert result.iterations == 20
    assert all(row.accepted for row in result.trace)


@pytest.mark.parametrize("weights", [URGENT, SECURE, BALANCED, MetricWeights(0.6, 0.2, 0.2), MetricWeights(0.2, 0.2, 0.6)])
def test_bco_matches_exhaustive_search(
    params: ChainParams, validators: list[ValidatorProfile], weights: MetricWeights
) -> None:
    """Greedy and grid search reach the same utility on the default pool."""
    greedy = bco(params, weights, validators)
    oracle = exhaustive_search(params, weights, validators)

    assert oracle.evaluations == 420
    assert greedy.iterations <= params.max_validators
    assert greedy.config.utility == pytest.approx(oracle.config.utility, rel=1e-12)


def test_exhaustive_search_is_grid_minimum(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """No grid point beats the returned configuration."""
    best = exhaustive_search(params, BALANCED, validators).config
    bounds = default_bounds(params, validators)
    ranked = order_validators(validators, params)
    for m in range(1, 22):
        for n in range(1, 21):
            assert best.utility <= evaluate(params, BALANCED, ranked[:m], n, bounds).utility + 1e-12


def test_exhaustive_search_single_candidate(validators: list[ValidatorProfile]) -> None:
    """A one-point grid returns that point."""
    params = ChainParams(min_validators=2, max_validators=2, min_block=7, max_block=7)
    result = exhaustive_search(params, BALANCED, validators)
    assert (result.config.m, result.config.n, result.evaluations) == (2, 7, 1)


def test_bco_single_step_range(validators: list[ValidatorProfile]) -> None:
    """With v = M-1 one gain test is evaluated."""
    params = ChainParams(min_validators=20, max_validators=21)
    assert bco(params, BALANCED, validators).iterations == 1


def test_bco_needs_v_plus_one_validators(params: ChainParams) -> None:
    """Test a pool smaller than v+1 is infeasible."""
    with pytest.raises(Infeasible):
        bco(params, BALANCED, [ValidatorProfile(1, 50.0, 0.05)])
    with pytest.raises(Infeasible):
        exhaustive_search(params, BALANCED, [ValidatorProfile(1, 50.0, 0.05)])


def test_bco_random_instances_respect_constraints() -> None:
    """BCO stays in the feasible box, never beats the grid oracle and matches it on unimodal profiles."""
    generator = np.random.default_rng(77)
    gaps = 0
    for _ in range(100):
        size = int(generator.integers(2, 22))
        pool = _random_pool(generator, size)
        params = _random_params(generator, size)
        weights = _random_weights(generator)

        result = bco(params, weights, pool)
        config = result.config
        assert result.iterations <= params.max_validators
        assert params.min_validators <= config.m <= params.max_validators
        assert params.min_block <= config.n <= params.max_block
        assert len(config.validator_ids) == config.m

        oracle = exhaustive_search(params, weights, pool)
        profile = [c.utility for c in utility_profile(params, weights, pool)]
        assert config.utility >= oracle.config.utility - 1e-12
        if is_unimodal(profile):
            assert config.utility == pytest.approx(oracle.config.utility, rel=1e-9)
        else:
            gaps += 1
            logger.info(f"Non-unimodal profile; BCO gap {config.utility - oracle.config.utility}")
    logger.info(f"{gaps} of 100 random profiles were not unimodal")


def test_metric_monotonicity() -> None:
    """L grows with n and m, C falls with n and does not fall with m, eta grows with m, U=1 at the bounds."""
    generator = np.random.default_rng(31)
    for _ in range(1000):
        size = int(generator.integers(2, 22))
        pool = _random_pool(generator, size)
        params = _random_params(generator, size)
        ranked = order_validators(pool, params)
        m = int(generator.integers(1, size))
        n = int(generator.integers(1, 50))

        assert latency(params, ranked[:m], n + 1, m) > latency(params, ranked[:m], n, m)
        assert latency(params, ranked[: m + 1], n, m + 1) > latency(params, ranked[:m], n, m)
        assert cost(ranked[:m], n + 1) < cost(ranked[:m], n)
        assert cost(ranked[: m + 1], n) >= cost(ranked[:m], n)
        assert security(params, m + 1) > security(params, m)

        bounds = NormalizationBounds(*generator.uniform(0.5, 100, 3))
        weights = _random_weights(generator)
        assert utility(bounds.latency, bounds.security, bounds.cost, weights, bounds) == pytest.approx(1.0, rel=1e-12)


def test_utility_profile_covers_every_m(params: ChainParams, validators: list[ValidatorProfile]) -> None:
    """One configuration per admissible validator count."""
    profile = utility_profile(params, BALANCED, validators)
    assert [c.m for c in profile] == list(range(1, 22))


def test_is_unimodal() -> None:
    """Falling then rising is unimodal; a second dip is not."""
    assert is_unimodal([5, 3, 2, 2, 4, 6])
    assert is_unimodal([1, 2, 3])
    assert is_unimodal([3, 2, 1])
    assert not is_unimodal([3, 1, 2, 0])
