"""Pytest wiring shared by the suite.

The acceptance tests append one summary line per criterion to
``acceptance_lines``; printing them from the terminal-summary hook keeps
them visible even though pytest captures stdout of passing tests.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
