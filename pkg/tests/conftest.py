import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}
_NOTES: list[str] = []


class AcceptanceLog:
    def record(self, number: int, title: str, passed: bool, detail: str) -> None:
        _RESULTS[number] = (title, bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}", flush=True)

    def note(self, text: str) -> None:
        _NOTES.append(text)
        print(f"info: {text}", flush=True)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        tr.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    for text in _NOTES:
        tr.write_line(f"info: {text}")
