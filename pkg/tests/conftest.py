"""Shared pytest hooks: print one line per acceptance criterion at the end."""

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, passed: bool, title: str, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, title, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[n]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"CRITERION {n:2d} [{verdict}] {title} — {detail}")
