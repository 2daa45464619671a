import os
from collections import defaultdict

import pytest

os.environ.setdefault("CLOUDRECON_HOME", os.path.join(os.path.dirname(__file__), "..", ".pytest_home"))

# criterion number -> [(nodeid, part, passed, detail)], filled by acceptance tests
_CRITERIA: dict[int, list] = defaultdict(list)
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title, part=None): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args[:2]
    part = marker.kwargs.get("part")
    _TITLES[number] = title
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[number].append((item.nodeid, part, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        ok = all(passed for _, _, passed, _ in results)
        parts = [f"({p}) {'pass' if passed else 'FAIL'}" for _, p, passed, _ in results if p]
        extra = f" [{', '.join(parts)}]" if parts else ""
        tr.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {_TITLES[number]}{extra}")
        for _, part, _, detail in results:
            if detail:
                tr.write_line(f"             {'(' + part + ') ' if part else ''}{detail}")
