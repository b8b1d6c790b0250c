"""Prints one pass/fail line per acceptance criterion after the run."""

ACCEPTANCE_RESULTS: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, verdict in sorted(set(ACCEPTANCE_RESULTS)):
        terminalreporter.write_line(f"criterion {cid:>2} {title}: {verdict}")
