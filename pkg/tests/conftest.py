import os
from pathlib import Path

import pytest

from spikeattack.dataset import TEST_FILES, TRAIN_FILES, data_dir


def mnist_available() -> bool:
    d = data_dir()
    return all((d / f).exists() for f in TRAIN_FILES + TEST_FILES)


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST not found; run `spikeattack fetch-data`")


@pytest.fixture(scope="session")
def artifacts_dir() -> Path:
    """Cache for trained models shared across test sessions."""
    d = Path(os.environ.get("SPIKEATTACK_ARTIFACTS", Path(__file__).resolve().parent.parent / "artifacts"))
    d.mkdir(parents=True, exist_ok=True)
    return d


_verdicts: list = []


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance line and fail the calling test if the criterion is not met."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    _verdicts.append((number, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance")
        for _, line in sorted(_verdicts):
            terminalreporter.write_line(line)
