import contextlib

import pytest

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.ok = None
        self.detail = ""

    def check(self, ok, detail=""):
        self.ok = bool(ok)
        self.detail = detail


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def run(name):
        c = _Criterion(name)
        try:
            yield c
        except Exception as exc:
            c.ok, c.detail = False, f"{type(exc).__name__}: {exc}"
            _emit(c)
            raise
        if c.ok is None:
            c.ok, c.detail = False, "no verdict recorded"
        _emit(c)
        assert c.ok, f"{name}: {c.detail}"

    return run


def _emit(c):
    line = f"{'PASS' if c.ok else 'FAIL'}  {c.name}  ({c.detail})"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
