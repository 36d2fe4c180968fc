import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from condvc.codec import build_model
from condvc.config import toy_model_config

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_models():
    """Untrained toy codecs at C=8, one per mode, built from the same seed."""
    return {m: build_model(toy_model_config(m, 8), seed=0).eval() for m in ("cc", "cr", "mcr")}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(num, (name, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        if report.outcome == "skipped":
            status = "SKIP"
        _CRITERIA[num] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  {name}")
