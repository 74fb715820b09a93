import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from codecaps import generate_keypair
from codecaps.wire import Network

sys.path.insert(0, os.path.dirname(__file__))

from helpers import Site  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")


def seeded(n: int):
    return generate_keypair(bytes([n]) * 32)


@pytest.fixture
def keys():
    """P0 is the service; P1..P4 are clients."""
    return [seeded(i + 1) for i in range(5)]


@pytest.fixture
def net():
    return Network()


@pytest.fixture
def site(net, keys):
    return Site(net, keys[0], "P0")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
