import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record the one-line pass/fail verdict of an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
        VERDICTS.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
