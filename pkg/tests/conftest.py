import pytest

# criterion number -> (title, passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {title}: {detail}")
