from __future__ import annotations

import re
import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
REPO_ROOT = TESTS_DIR.parent

# fixture_builders lives beside the tests, not in the package
sys.path.insert(0, str(TESTS_DIR))

from fablesim.memory import HashedNgramEmbedder  # noqa: E402


@pytest.fixture(scope="session")
def embedder() -> HashedNgramEmbedder:
    return HashedNgramEmbedder()


@pytest.fixture(scope="session")
def demo_world_path() -> Path:
    return REPO_ROOT / "demo" / "world.json"


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance check when that file ran."""
    outcomes = {"passed": "PASS", "failed": "FAIL", "error": "FAIL", "skipped": "SKIP"}
    results: dict[tuple[int, str], str] = {}
    for key, label in outcomes.items():
        for report in terminalreporter.stats.get(key, []):
            match = re.search(
                r"test_acceptance\.py::test_c(\d+)_([a-z0-9_]+)", getattr(report, "nodeid", "")
            )
            if match:
                results[(int(match.group(1)), match.group(2))] = label
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance checks")
    for (number, name), outcome in sorted(results.items()):
        title = name.replace("_", " ")
        terminalreporter.write_line(f"{number:>2} {title:<36} {outcome}")
