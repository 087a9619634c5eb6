import os

import pytest

from loratwin.config import ServerConfig
from loratwin.estimators import Estimators, LatencyCoefficients, LoadLatencyTable, MemoryModel
from loratwin.engine import native_available

BACKENDS = ["python"] + (["native"] if native_available() else [])


def make_config(slots=1, k=None, budget=1_000_000, base_cost=0.0, load=None, **kw):
    """Server config with only the given coefficients non-zero (k7 defaults to 1)."""
    coeffs = dict(k5=0.1, k7=1.0)
    coeffs.update(k or {})
    est = Estimators(
        LatencyCoefficients(**coeffs),
        MemoryModel(budget, 0.0, None, base_cost),
        LoadLatencyTable(load or {8: 0.0, 16: 0.0, 32: 0.0}),
    )
    return ServerConfig(slots=slots, estimators=est, **kw)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def pytest_report_header(config):
    return f"loratwin native core: {'yes' if native_available() else 'no'}; cpus: {os.cpu_count()}"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
