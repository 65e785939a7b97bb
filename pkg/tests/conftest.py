import random

import pytest

from vecap.llmclient import LLMClient, RetryPolicy
from vecap.mockllm import MockRule, MockScript, serve


@pytest.fixture
def client():
    # no real backoff sleeps in tests
    return LLMClient(token=None, sleep=lambda s: None, rng=random.Random(0))


@pytest.fixture
def fast_policy():
    return RetryPolicy(max_attempts=3, base_delay=0.0, max_delay=0.0, timeout=5.0)


@pytest.fixture
def echo_server():
    with serve(MockScript()) as server:
        yield server


@pytest.fixture
def make_server():
    servers = []

    def _make(*rules, seed=0):
        server = serve(MockScript(rules=list(rules), seed=seed))
        servers.append(server)
        return server

    yield _make
    for s in servers:
        s.close()


@pytest.fixture
def pipeline_servers(make_server):
    """Captioner answering from the image ref, fuser refusing on 'forbidden'."""
    captioner = make_server(MockRule(match="Describe", respond="A detailed view of {image_ref}"))
    fuser = make_server(MockRule(match="forbidden", refusal=True))
    return captioner, fuser


# --- acceptance summary -------------------------------------------------------

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.get_closest_marker("criterion") and (report.when == "call" or report.failed):
        label = item.get_closest_marker("criterion").args[0]
        doc = (item.obj.__doc__ or item.name).strip().splitlines()[0]
        _CRITERIA.append((label, "PASS" if report.passed else "FAIL", doc))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, doc in sorted(_CRITERIA, key=lambda c: int(c[0][1:])):
        terminalreporter.write_line(f"{status} {label}: {doc}")
