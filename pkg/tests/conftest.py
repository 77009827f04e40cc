import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line immediately and keep it for the session summary."""

    def emit(number, title, ok, detail):
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
