import numpy as np
import pytest

from tmx import fem
from tmx.potential import concentration_level

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def disk3():
    return fem.build_disk_mesh(3)


@pytest.fixture(scope="session")
def disk4():
    return fem.build_disk_mesh(4)


@pytest.fixture(scope="session")
def report3(disk3):
    return concentration_level(disk3)


@pytest.fixture(scope="session")
def report4(disk4):
    return concentration_level(disk4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, name = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[number] = f"[{status}] criterion {number:2d}: {name} ({report.duration:.1f} s)"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
    passed = sum(line.startswith("[PASS]") for line in _ACCEPTANCE.values())
    terminalreporter.write_line(f"{passed}/{len(_ACCEPTANCE)} criteria pass")
