"""Shared test plumbing: the acceptance checklist printed after the run."""

ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str = "") -> str:
    status = "PASS" if ok else "FAIL"
    line = f"{status} | {name}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
