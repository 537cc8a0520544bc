import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES = []

REPO = Path(__file__).resolve().parents[1]


def cifar_dir():
    """CIFAR-10 binary batches: $MONOPROBE_CIFAR_DIR, else <repo>/data/cifar-10-batches-bin."""
    env = os.environ.get("MONOPROBE_CIFAR_DIR")
    path = Path(env) if env else REPO / "data" / "cifar-10-batches-bin"
    return path if (path / "test_batch.bin").exists() else None


@pytest.fixture
def acceptance_line():
    def record(number, passed, detail):
        line = f"[acceptance {number:>2}] {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
