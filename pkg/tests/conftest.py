RESULTS = {}


def record(criterion, ok, detail):
    """Remember one acceptance outcome; repeated calls for a criterion are combined."""
    prev_ok, lines = RESULTS.get(criterion, (True, []))
    RESULTS[criterion] = (prev_ok and ok, lines + [detail])
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(RESULTS):
        ok, lines = RESULTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {'; '.join(lines)}")
