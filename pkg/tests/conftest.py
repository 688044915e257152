import re

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    number = re.match(r"test_criterion_(\d+)", request.node.name).group(1)
    seen = []

    def record(ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        seen.append(line)
        VERDICTS.append(line)
        print(line)
        assert ok, line

    yield record
    if not seen:
        VERDICTS.append(f"criterion {number}: FAIL  (raised before a verdict was reached)")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
