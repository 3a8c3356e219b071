import math

import pytest
from hypothesis import HealthCheck, settings

from constrained_kyle import ModelParams, build_solution

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# tau(1) with sigma_a = sigma_w = 1, evaluated with mpmath at 30 digits
TAU_ONE = 0.782200794195933213856185458738


@pytest.fixture(scope="session")
def fig_params():
    return ModelParams(sigma_w=1.0, sigma_a=1.0, sigma_v=1.0, rho=0.3, T=1.0)


@pytest.fixture(scope="session")
def sol(fig_params):
    return build_solution(fig_params)


@pytest.fixture(scope="session")
def sol_unit():
    """r0 = 1 exactly: rho = 1, all sigmas 1, T = tau(1)."""
    return build_solution(ModelParams(1.0, 1.0, 1.0, 1.0, TAU_ONE))


@pytest.fixture(scope="session", params=[1.0, 3.0, 5.0], ids=lambda s: f"sigma_a={s:g}")
def fig_sol(request, fig_params):
    return build_solution(fig_params.replace(sigma_a=request.param))


def isclose(a, b, rel=0.0, abs_=0.0):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """Record one criterion's verdict; the line is printed now and in the terminal summary."""
    results = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
