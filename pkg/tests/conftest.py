import pytest

_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    marks = getattr(report, "acceptance", None)
    if marks is None:
        return
    num, title = marks
    entry = _results.setdefault(num, {"title": title, "ok": True, "ran": False})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        r = _results[num]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {num:>2} {status}  {r['title']}")
