import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", ""):
                continue
            if rep.when != "call" and not (outcome == "skipped" or rep.failed):
                continue
            name = rep.nodeid.split("::")[-1][len("test_criterion_"):]
            num, _, label = name.partition("_")
            props = dict(rep.user_properties)
            status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
            if outcome == "passed" and props.get("reported_only"):
                status = "INFO"
            if outcome == "skipped" and isinstance(rep.longrepr, tuple):
                detail = rep.longrepr[2].removeprefix("Skipped: ")
            else:
                detail = props.get("detail", "")
            lines.append((int(num), f"criterion {num:>2} {status:4s} {label}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
