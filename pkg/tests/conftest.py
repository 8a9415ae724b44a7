import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the one-line verdict per acceptance criterion, if that suite ran."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance summary")
        for line in lines:
            terminalreporter.write_line(line)
