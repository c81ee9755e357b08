import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # lets tests import the shared oracles module

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_VERDICTS: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _CRITERION.search(item.nodeid)
    if not m or rep.when != "call" and not rep.failed:
        return
    n = int(m.group(1))
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        reason = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
        _VERDICTS[n] = ("FAIL", detail or reason)
    elif n not in _VERDICTS:
        _VERDICTS[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
