import sys

import numpy as np
import pytest
from hypothesis import settings

from ggreg import _backend, _sgl_py

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

try:
    from ggreg import _sgl_core
except ImportError:  # extension not built
    _sgl_core = None

KERNELS = {"python": _sgl_py}
if _sgl_core is not None:
    KERNELS["cython"] = _sgl_core


@pytest.fixture(params=sorted(KERNELS))
def backend(request, monkeypatch):
    """Run the test once per available coordinate-descent kernel."""
    monkeypatch.setattr(_backend, "solve", KERNELS[request.param].solve)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
