"""Acceptance reporting: one PASS/FAIL/WARN line per criterion in the summary."""
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")
    config.stash[CRITERIA] = {}


CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    n, title = marker.args
    props = dict(item.user_properties)
    status = "PASS" if rep.passed else "FAIL"
    if rep.passed and props.get("warn"):
        status = "WARN"
    item.config.stash[CRITERIA][n] = (title, status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter, config):
    crit = config.stash.get(CRITERIA, {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        title, status, detail = crit[n]
        line = f"criterion {n:>2} {status:<4} {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
