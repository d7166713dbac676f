import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_RESULTS = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    _RESULTS[int(m.group(1))] = (m.group(2).replace("_", " "), report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_RESULTS):
        name, outcome, detail = _RESULTS[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}" + (f" | {detail}" if detail else ""))
