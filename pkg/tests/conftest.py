from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("WAVEIR_ACCEPTANCE_DIR", ROOT / "acceptance_results"))

_VERDICTS: dict[int, tuple[bool, str]] = {}


def pytest_collection_modifyitems(config, items):
    if os.environ.get("WAVEIR_FULL") == "1":
        return
    skip = pytest.mark.skip(reason="full-size run; set WAVEIR_FULL=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def verdict():
    """Record an acceptance outcome; the summary lists one line per criterion."""

    def record(number: int, passed: bool, detail: str) -> None:
        _VERDICTS[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")

    return record


@pytest.fixture
def artifacts() -> Path:
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    return ARTIFACTS


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        ok, detail = _VERDICTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
