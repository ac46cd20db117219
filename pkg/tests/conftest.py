import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import VERDICTS  # noqa: E402


@pytest.fixture
def fast_watchdog():
    """Seconds to wait before a deliberately stuck world reports a deadlock."""
    return 0.3


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
