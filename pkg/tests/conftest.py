import numpy as np
import pytest
import torch

from cdcl.data import PersonAnnotation

torch.set_num_threads(1)


def person_from_points(points, j=17):
    """PersonAnnotation with the given {index: (x, y)} labeled, others absent."""
    kp = np.zeros((j, 3))
    for i, (x, y) in points.items():
        kp[i] = (x, y, 1)
    return PersonAnnotation(kp)


@pytest.fixture
def make_person():
    return person_from_points


ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number, name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
