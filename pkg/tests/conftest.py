import re

import numpy as np
import pytest
import torch

from satforecast.config import toy_config


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest profile that still exercises every module."""
    cfg = toy_config()
    return cfg


_CRITERION_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")
_criterion_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    match = _CRITERION_PATTERN.search(report.nodeid)
    if match:
        number = int(match.group(1))
        name = match.group(2).replace("_", " ")
        _criterion_results[number] = (report.outcome.upper(), name)


def pytest_terminal_summary(terminalreporter):
    if not _criterion_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criterion_results):
        outcome, name = _criterion_results[number]
        status = "PASS" if outcome == "PASSED" else outcome
        terminalreporter.write_line(f"criterion {number:>2}: {status:<6} {name}")
