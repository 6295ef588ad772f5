import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from _toys import VERDICTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
