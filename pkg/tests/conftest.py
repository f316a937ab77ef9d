import pytest

_results: dict[int, list[bool]] = {}

TITLES = {
    1: "scheduler algebra",
    2: "gradient fidelity",
    3: "input-channel adaptation",
    4: "metric oracles",
    5: "loss decomposition",
    6: "end-to-end desk-scale learning",
    7: "marker discrimination",
    8: "inference regimes",
    9: "curation rules",
    10: "determinism and persistence",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _results.setdefault(mark.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok = all(_results[n])
        terminalreporter.write_line(f"criterion {n:>2} {TITLES.get(n, '')}: {'PASS' if ok else 'FAIL'} "
                                    f"({sum(_results[n])}/{len(_results[n])} checks)")
