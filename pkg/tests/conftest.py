import pytest

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_CRITERIA] = {}


@pytest.fixture
def measured(request):
    """Dict for a criterion test to fill with the numbers it measured."""
    values = {}
    request.node.stash[_CRITERIA] = values
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    details = item.stash.get(_CRITERIA, {})
    item.config.stash[_CRITERIA][number] = (title, rep.passed, details)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, details = results[number]
        info = ", ".join(f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{info}]" if info else "")
        )
