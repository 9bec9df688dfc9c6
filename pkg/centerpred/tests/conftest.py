ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} | {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
