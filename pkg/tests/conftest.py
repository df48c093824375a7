import os
import sys

from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("attnlab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("attnlab")

# Acceptance verdicts, filled in by test_acceptance.py and repeated at the
# end of the run so that they appear together in the log.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
