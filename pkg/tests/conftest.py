import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=30, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

_criterion_lines: list[str] = []


@pytest.fixture
def report():
    """Record one verdict line per acceptance criterion; shown in the terminal summary."""

    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        print(line)
        _criterion_lines.append(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
