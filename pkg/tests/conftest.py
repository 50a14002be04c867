import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from capture_kernels import _backend

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _restore_backend():
    # the CLI's --backend flag mutates the process-wide choice
    prev = _backend.get_backend()
    yield
    _backend.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for i in sorted(results):
        terminalreporter.write_line(mod.format_line(i))
