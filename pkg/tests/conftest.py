import re

import pytest

_DETAILS: dict[str, str] = {}


@pytest.fixture
def measured(request):
    """Attach a one-line measurement to the running test for the summary."""

    def note(text: str) -> None:
        _DETAILS[request.node.nodeid] = text
        print(text)

    return note


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call" or (m and outcome == "error"):
                status = "PASS" if outcome == "passed" else "FAIL"
                name = m.group(2).replace("_", " ")
                rows.append((int(m.group(1)), f"{status}  criterion {int(m.group(1)):2d}  {name}: "
                                              f"{_DETAILS.get(rep.nodeid, '-')}"))
    if rows:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(rows):
            terminalreporter.write_line(line)
