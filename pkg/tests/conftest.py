import contextlib

import pytest

from tpcbench.ca import create_authority, issue_host_credential
from tpcbench.endpoint import EndpointConfig, serve
from tpcbench.storage import DiskStorage, MemoryStorage
from tpcbench.tls import client_context


@pytest.fixture(scope="session")
def ca():
    return create_authority("TPCBench Test CA", 30)


@pytest.fixture(scope="session")
def cred(ca):
    return issue_host_credential(ca, ["localhost", "127.0.0.1"], 5)


@pytest.fixture(scope="session")
def ctx(ca, cred):
    return client_context(ca, cred)


@pytest.fixture
def make_endpoint(ca, cred, tmp_path):
    """Factory for endpoints that are stopped at teardown."""
    handles = []
    counter = iter(range(1000))

    def make(backend="memory", **kw):
        storage = DiskStorage(tmp_path / f"disk{next(counter)}") if backend == "disk" else MemoryStorage()
        kw.setdefault("marker_period", 0.2)
        h = serve(EndpointConfig(storage=storage, credential=cred, trust=ca, **kw))
        handles.append(h)
        return h

    yield make
    for h in handles:
        with contextlib.suppress(Exception):
            h.stop()


@pytest.fixture
def pair(make_endpoint):
    return make_endpoint(), make_endpoint()


# -- acceptance summary ----------------------------------------------------

_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        title = dict(report.user_properties).get("criterion", report.nodeid.split("::")[-1])
        _acceptance[report.nodeid] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for title, outcome in sorted(_acceptance.values()):
        terminalreporter.write_line(f"{outcome}  {title}")
