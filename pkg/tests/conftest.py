import pytest

# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """``with criterion(n) as note: ...`` records PASS/FAIL for criterion ``n``."""
    import contextlib

    @contextlib.contextmanager
    def record(n):
        notes = []
        try:
            yield notes.append
        except BaseException as err:
            ACCEPTANCE[n] = (False, "; ".join(notes + [f"{type(err).__name__}: {err}".splitlines()[0]]))
            raise
        prev_ok, prev = ACCEPTANCE.get(n, (True, ""))
        ACCEPTANCE[n] = (prev_ok, "; ".join(filter(None, [prev] + notes)))

    return record
