"""Collects the acceptance criteria and prints one PASS/FAIL line each."""
import pytest

_OUTCOMES: dict[str, str] = {}
_DETAILS: dict[str, list] = {}
_ORDER: list[str] = []


def _criterion(item):
    mark = item.get_closest_marker("acceptance")
    return mark.args[0] if mark and mark.args else None


def pytest_collection_finish(session):
    for item in session.items:
        name = _criterion(item)
        if name and name not in _ORDER:
            _ORDER.append(name)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = _criterion(item)
    if name is None:
        return
    for key, value in rep.user_properties if rep.when == "call" else ():
        if key == "detail":
            _DETAILS.setdefault(name, []).append(str(value))
    if rep.failed:
        _OUTCOMES[name] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _OUTCOMES.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ORDER:
        return
    terminalreporter.section("acceptance criteria")
    for name in _ORDER:
        detail = f"  [{'; '.join(_DETAILS[name])}]" if name in _DETAILS else ""
        terminalreporter.write_line(f"{_OUTCOMES.get(name, 'NOT RUN'):7s} {name}{detail}")
