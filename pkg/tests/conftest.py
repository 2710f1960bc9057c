import numpy as np
import pytest
import torch

from mdarsn.split import default_class_list

_CRITERIA = {}


def pytest_configure(config):
    torch.set_num_threads(1)
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    entry = _CRITERIA.get(report.nodeid)
    if entry is None:
        return
    if report.failed:
        entry["status"] = "FAIL"
    elif report.when == "call" and report.passed and entry["status"] is None:
        entry["status"] = "PASS"


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = {"n": mark.args[0], "title": mark.args[1], "status": None}


def pytest_terminal_summary(terminalreporter):
    ran = [e for e in _CRITERIA.values() if e["status"] is not None]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(ran, key=lambda e: e["n"]):
        terminalreporter.write_line(f"criterion {e['n']:>2}: {e['status']}  {e['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def classes():
    return default_class_list()
