import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kanoclip.data import make_synthetic_dataset  # noqa: E402

_criteria: dict[str, list[str]] = {}


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 24-image synthetic dataset shared by the quick tests."""
    root = tmp_path_factory.mktemp("small")
    make_synthetic_dataset(root, 24, seed=5)
    return root


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        key = f"{marker.args[0]:>2}. {marker.args[1]}"
        _criteria.setdefault(key, []).append(report.outcome)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k.split(".")[0])):
        verdict = "PASS" if all(o == "passed" for o in _criteria[key]) else "FAIL"
        terminalreporter.write_line(f"criterion {key}: {verdict}")
