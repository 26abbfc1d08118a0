import numpy as np
import pytest
import torch

from fscil.data import SplitConfig, build_session_stream, synth_blob_source


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_source():
    return synth_blob_source(classes=20, per_class=40, dim=64, separation=10.0, seed=0)


@pytest.fixture(scope="session")
def small_stream(blob_source):
    return build_session_stream(blob_source, SplitConfig(12, 4, 2, 5, seed=0))




# ---------------------------------------------------------------- acceptance report

_ACCEPT = pytest.StashKey[dict]()
_config = None


def pytest_configure(config):
    global _config
    _config = config
    torch.set_num_threads(1)
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test decides")


def _entry(nodeid):
    return _config.stash.setdefault(_ACCEPT, {}).setdefault(nodeid, {"detail": []})


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        _entry(item.nodeid)["title"] = f"criterion {mark.args[0]}: {mark.args[1]}"


@pytest.fixture
def measured(request):
    """``measured(text)`` appends a measured value to this criterion's report line."""
    return _entry(request.node.nodeid)["detail"].append


def pytest_runtest_logreport(report):
    store = _config.stash.get(_ACCEPT, {})
    if report.nodeid not in store:
        return
    entry = store[report.nodeid]
    if report.failed:
        entry["outcome"] = "FAIL"
    elif report.when == "call" and "outcome" not in entry:
        entry["outcome"] = "PASS"


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_ACCEPT, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(store.values(), key=lambda e: e["title"]):
        detail = f" [{'; '.join(entry['detail'])}]" if entry["detail"] else ""
        terminalreporter.write_line(f"{entry.get('outcome', 'FAIL')}  {entry['title']}{detail}")
