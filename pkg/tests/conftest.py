import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_RESULTS:
            terminalreporter.write_line(line)
