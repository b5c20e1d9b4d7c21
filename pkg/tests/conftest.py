import time
from contextlib import contextmanager

import pytest

_VERDICTS: list[str] = []


def _record(num: int, ok: bool, title: str, detail: str) -> str:
    line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    _VERDICTS.append(line)
    print(line)
    return line


@pytest.fixture
def criterion():
    """Context manager that logs one pass/fail line for an acceptance criterion.

    The body may put a short summary into ``state["detail"]``.
    """

    @contextmanager
    def run(num: int, title: str):
        state = {"detail": ""}
        t0 = time.perf_counter()
        try:
            yield state
        except BaseException as e:
            msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
            _record(num, False, title, f"{msg}; {time.perf_counter() - t0:.1f}s")
            raise
        _record(num, True, title, f"{state['detail']}; {time.perf_counter() - t0:.1f}s".lstrip("; "))

    return run


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
