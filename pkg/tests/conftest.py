import os

os.environ.setdefault("JFFRA_DETERMINISTIC", "1")

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _seed_torch():
    # tests drawing from the global generator get the same inputs in any order
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log():
    def record(name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
