import contextlib

import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class CriterionLog:
    @contextlib.contextmanager
    def check(self, number: int, title: str):
        """Record PASS/FAIL for one acceptance criterion; failures still raise."""
        detail = {"text": ""}
        try:
            yield detail
        except BaseException:
            _CRITERIA[number] = (title, False, detail["text"])
            raise
        _CRITERIA[number] = (title, True, detail["text"])


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {text}".rstrip())
