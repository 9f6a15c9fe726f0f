import pytest

from enrichment.design import DesignSpec, EventsPlan, TrialDesign
from enrichment.numerics import RngStream
from enrichment.simdata import JointModelParams, simulate_population


@pytest.fixture(scope="session")
def spec() -> DesignSpec:
    return DesignSpec.calibrated()


@pytest.fixture(scope="session")
def table_design(spec) -> TrialDesign:
    """The (49, 215) event-count design for gamma = 0.8, sigma = 1, phi2 = 5."""
    return TrialDesign(spec, EventsPlan.from_event_counts(spec, 49, 215))


@pytest.fixture(scope="session")
def null_params() -> JointModelParams:
    return JointModelParams.scenario("null")


@pytest.fixture(scope="session")
def alt_params() -> JointModelParams:
    return JointModelParams.scenario("alternative")


@pytest.fixture(scope="session")
def population(alt_params):
    return simulate_population(alt_params, 800, 400.0, RngStream(11, 0))
