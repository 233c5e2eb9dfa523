import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow acceptance criteria (model training, hours on one CPU)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs --runslow")
    config._acceptance_lines = {}


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records the summary line for acceptance criterion ``n``."""
    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config._acceptance_lines[n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config._acceptance_lines
    names = {int(item.split("criterion_")[1].split("_")[0]) for item in _acceptance_ids(terminalreporter)}
    if not lines and not names:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(names | set(lines)):
        terminalreporter.write_line(lines.get(n, f"criterion {n:>2}: SKIP  (slow; use --runslow)"))


def _acceptance_ids(reporter):
    for reports in reporter.stats.values():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and getattr(rep, "when", "call") in ("call", "setup"):
                yield nodeid
