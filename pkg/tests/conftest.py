from __future__ import annotations

import pytest

from cope.backends import Backend, BackendConfig, ChatResponse
from cope.synth import SynthConfig, generate_corpus


@pytest.fixture(scope="session")
def synth200():
    return generate_corpus(SynthConfig(n=200, seed=1))


@pytest.fixture(scope="session")
def synth28():
    return generate_corpus(SynthConfig(n=28, seed=5))


@pytest.fixture
def mock_backend():
    return Backend(BackendConfig(kind="mock", model_name="mock-oracle"))


class ScriptedBackend:
    """Replays canned responses in order and records every request it sees."""

    def __init__(self, responses, max_retries=3, model_name="scripted"):
        self.responses = list(responses)
        self.requests = []
        self.model_name = model_name
        self.config = BackendConfig(kind="mock", model_name=model_name, max_retries=max_retries)

    def complete(self, request):
        self.requests.append(request)
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return ChatResponse(item, 0.0, attempt=1)


@pytest.fixture
def scripted():
    return ScriptedBackend


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def report(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
