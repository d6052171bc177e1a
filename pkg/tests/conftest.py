import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@contextmanager
def _record(number: int, title: str):
    notes: list[str] = []
    try:
        yield notes.append
    except BaseException as exc:
        ACCEPTANCE[number] = (title, False, "; ".join(notes + [f"{type(exc).__name__}: {exc}"]))
        raise
    ACCEPTANCE[number] = (title, True, "; ".join(notes))


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records a pass/fail line for criterion ``n``."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail.splitlines()[0][:300]}]"
        terminalreporter.write_line(line)
