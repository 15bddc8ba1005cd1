"""Collects one pass/fail line per acceptance criterion and prints them after the run."""
import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    cid, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    crash = getattr(report.longrepr, "reprcrash", None)
    if report.failed and crash is not None:
        first = crash.message.splitlines()[0]
        detail = f"{detail}; {first}" if detail else first
    _RESULTS[cid] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS):
        status, title, detail = _RESULTS[cid]
        terminalreporter.write_line(f"[{status}] C{cid:02d} {title}" + (f": {detail}" if detail else ""))
