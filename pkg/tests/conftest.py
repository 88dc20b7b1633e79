import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_AC = re.compile(r"test_acceptance\.py::test_ac(\d+)_")
_results = {}


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    entry = _results.setdefault(n, {"ok": True, "seen": False, "notes": []})
    if report.when == "call" or report.failed:
        entry["seen"] = True
    if report.failed:
        entry["ok"] = False
    for key, value in report.user_properties:
        if report.when == "call":
            entry["notes"].append(f"{key}={value}")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        status = "PASS" if r["ok"] and r["seen"] else "FAIL"
        notes = ("  " + " ".join(r["notes"])) if r["notes"] else ""
        terminalreporter.write_line(f"AC{n} {status}{notes}")
