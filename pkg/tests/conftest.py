import pytest

_RESULTS: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        # a known-failing criterion is collected as xfail; it still reports FAIL
        ok = rep.passed and not hasattr(rep, "wasxfail")
        _RESULTS.setdefault(name, []).append("PASS" if ok else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _RESULTS.items():
        status = "PASS" if all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
