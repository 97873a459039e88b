import time

import pytest

_CRITERIA: list[tuple[str, str, str, float, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(code, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    code, title = props["criterion"]
    outcome = "PASS" if report.passed else "FAIL"
    _CRITERIA.append((code, title, outcome, props.get("elapsed", 0.0), props.get("detail", "")))


@pytest.fixture(autouse=True)
def _criterion_tag(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for code, title, outcome, elapsed, detail in sorted(_CRITERIA, key=lambda r: int(r[0][1:])):
        line = f"{code} {outcome} {title} ({elapsed:.2f} s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
