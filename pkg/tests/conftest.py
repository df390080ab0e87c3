import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import support  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not support.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(support.CRITERIA):
        terminalreporter.write_line(support.CRITERIA[number])
