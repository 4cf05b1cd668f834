"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import re

_CRITERIA = {}
_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _CRITERIA.setdefault(int(m.group(1)), {"ok": True, "details": []})
        entry["ok"] &= report.outcome == "passed"
        entry["details"] += [str(v) for k, v in report.user_properties if k == "measured"]
        if report.outcome != "passed":
            entry["details"].append(f"{report.nodeid.split('::')[-1]} {report.outcome}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  " + "; ".join(e["details"]))
