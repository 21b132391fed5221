"""Collects acceptance-criterion outcomes and prints one summary line per criterion."""

import pytest

_OUTCOMES: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _OUTCOMES.setdefault(mark.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        runs = [r for r in _OUTCOMES[n] if r[1] != "SKIP"]
        if not runs:
            terminalreporter.write_line(f"criterion {n:2d}: SKIP")
            continue
        status = "PASS" if all(r[1] == "PASS" for r in runs) else "FAIL"
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {details}")
