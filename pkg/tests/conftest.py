import os
from pathlib import Path

import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((name, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return passed


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory) -> Path:
    """Working directory for the full-scale runs.

    Set GLSS_TEST_CACHE to keep trained checkpoints between sessions;
    otherwise everything is trained from scratch in a temporary directory.
    """
    cache = os.environ.get("GLSS_TEST_CACHE")
    if cache:
        root = Path(cache)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("acceptance")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
