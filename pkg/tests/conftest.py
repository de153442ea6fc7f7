import re
from collections import OrderedDict

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: "OrderedDict[int, dict]" = OrderedDict()


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = int(m.group(1))
        entry = _results.setdefault(n, {"passed": True, "details": []})
        entry["passed"] &= report.outcome == "passed"
        entry["details"].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + "  ".join(entry["details"]))
