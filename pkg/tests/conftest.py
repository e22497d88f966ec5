"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest

_VERDICTS = {}


class _Recorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> bool:
        _VERDICTS[number] = (title, bool(ok), detail)
        return bool(ok)


@pytest.fixture(scope="session")
def criterion():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
