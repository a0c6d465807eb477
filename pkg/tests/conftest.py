import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""

    class Recorder:
        def __init__(self):
            self.number = None

        def __call__(self, number, title, passed, detail=""):
            self.number = number
            _CRITERIA[number] = (title, bool(passed), detail)
            assert passed, f"criterion {number} ({title}) failed: {detail}"

    rec = Recorder()
    yield rec


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
