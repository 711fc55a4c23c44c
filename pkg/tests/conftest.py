"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[int, list[tuple[str, str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _RESULTS.setdefault(marker.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        for name, status, detail in _RESULTS[number]:
            line = f"criterion {number:>2}: {status}  {name}"
            terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the criterion report."""
    def record(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return record
