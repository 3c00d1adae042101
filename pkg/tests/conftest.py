import time
from dataclasses import dataclass

import pytest
import torch

from tplab.harness import reference_training

REFERENCE_SEED = 0
MAX_STEPS = 5000

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class Trained:
    model: object
    steps: int
    seconds: float
    eval_accuracy: float


@pytest.fixture(scope="session")
def trained():
    """The reference toy model: all three tasks, reference seed, single thread."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        t0 = time.perf_counter()
        model, res = reference_training("mixed", REFERENCE_SEED, MAX_STEPS)
        seconds = time.perf_counter() - t0
    finally:
        torch.set_num_threads(threads)
    return Trained(model, res.steps_run, seconds, res.eval_accuracy)


@pytest.fixture
def acceptance():
    """Record a criterion's outcome for the summary, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_collection_modifyitems(items):
    for item in items:
        if "trained" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
