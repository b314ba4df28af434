import numpy as np
import pytest

from sopabn.instances import load_linear
from sopabn.linear import LinearPabn, random_linear_instance
from sopabn.sampling import ParameterPosterior, stream


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def d4():
    """Shipped four-input linear instance with a degenerate posterior."""
    params, policy, posterior = load_linear("linear_d4", degenerate=True)
    return LinearPabn(policy), params, posterior


def random_problem(seed, n_states=2, n_actions=1, horizon=2, diagonal=False, affine=True):
    params, policy = random_linear_instance(n_states, n_actions, horizon, stream(seed, "test-instance"),
                                           diagonal=diagonal)
    return LinearPabn(policy, affine=affine), params, ParameterPosterior(params)


# one line per acceptance criterion, repeated in the terminal summary so it survives output capture
CRITERIA: dict[tuple[int, str], str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])
