import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """record(criterion, ok, detail): one line per criterion in the terminal summary."""

    def record(cid, ok, detail):
        _ACCEPTANCE[cid] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:>4s} {'PASS' if ok else 'FAIL'}  {detail}")
