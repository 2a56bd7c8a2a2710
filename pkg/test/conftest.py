import pytest

from medchain.chain_optimizer import ChainParams, MetricWeights, ValidatorProfile
from medchain.ledger_channels import canonical_channels, Channel, ChannelMode, ChannelSpec

DEFAULT_COMPUTE = [100, 98, 96, 95, 93, 92, 90, 88, 32, 31, 30, 29, 28, 27, 26, 25, 24, 23, 22, 21, 20]
DEFAULT_PRICES = [0.08, 0.1, 0.06, 0.09, 0.07, 0.05, 0.1, 0.08, 0.03, 0.02, 0.04, 0.01, 0.03, 0.02, 0.05, 0.01, 0.04, 0.02, 0.03, 0.01, 0.02]

BALANCED = MetricWeights(0.34, 0.33, 0.33)


@pytest.fixture
def params() -> ChainParams:
    return ChainParams()


@pytest.fixture
def validators() -> list[ValidatorProfile]:
    """The validator pool of the bundled paper_default scenario."""
    return [ValidatorProfile(i + 1, float(x), p) for i, (x, p) in enumerate(zip(DEFAULT_COMPUTE, DEFAULT_PRICES))]


@pytest.fixture
def specs() -> list[ChannelSpec]:
    """Urgent, secure and normal channels plus the fixed m=8, n=80 reference, out of order."""
    return [
        ChannelSpec(4, ChannelMode.Fixed, BALANCED, m=8, n=80),
        ChannelSpec(2, ChannelMode.Optimized, MetricWeights(0.1, 0.8, 0.1)),
        ChannelSpec(1, ChannelMode.Optimized, MetricWeights(0.98, 0.01, 0.01)),
        ChannelSpec(3, ChannelMode.Optimized, BALANCED),
    ]


@pytest.fixture
def channels(specs: list[ChannelSpec], params: ChainParams, validators: list[ValidatorProfile]) -> tuple[Channel, ...]:
    return canonical_channels(specs, params, validators)
