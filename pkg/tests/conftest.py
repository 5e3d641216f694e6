import contextlib

import pytest

from modelbridge import serve_models
from modelbridge.balancer import BalancerConfig, run_balancer


@contextlib.contextmanager
def serving(*models, **kwargs):
    handle = serve_models(list(models), 0, **kwargs)
    try:
        yield handle
    finally:
        handle.shutdown()


@contextlib.contextmanager
def balancing(urls, **kwargs):
    handle = run_balancer(BalancerConfig(list(urls), **kwargs))
    try:
        yield handle
    finally:
        handle.shutdown()


@pytest.fixture
def serve():
    with contextlib.ExitStack() as stack:
        yield lambda *models, **kw: stack.enter_context(serving(*models, **kw))


# one summary line per acceptance criterion, printed after the run
_criteria: dict[int, tuple[str, str, list]] = {}


def pytest_runtest_logreport(report):
    marker = "test_acceptance.py::test_criterion_"
    if marker not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split(marker, 1)[1]
        number, _, label = name.partition("_")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _criteria[int(number)] = (status, label.replace("_", " "), report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, label, props = _criteria[number]
        detail = ", ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {label}" + (f" ({detail})" if detail else ""))
