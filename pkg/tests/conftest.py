import numpy as np
import pytest
import torch

from cddrec.corpus import InteractionSequence

torch.set_num_threads(1)

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def accept():
    """Record one pass/fail summary line per acceptance criterion."""

    def record(label: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}" + (f" :: {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_sequences():
    return [
        InteractionSequence(1, (1, 2, 3, 4, 5)),
        InteractionSequence(2, (2, 3, 4, 6)),
        InteractionSequence(3, (5, 6, 1)),
    ]
