from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from ecdmas.agents import (
    GenerationSpec,
    run_domain_agent,
    run_evaluation_agent,
    run_evidence_agent,
    run_item_agent,
    run_scenario_agent,
)
from ecdmas.backend import GenerationResponse
from ecdmas.mock import MockBackend, MockScript
from ecdmas.pipeline import Backends, PipelineConfig, run_pipeline

FIXED_TIME = "2026-01-01T00:00:00Z"


class ScriptedBackend:
    """Replies from a fixed list (last reply repeats); records every request."""

    label = "scripted"

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        text = self.replies[min(len(self.requests) - 1, len(self.replies) - 1)]
        return GenerationResponse(text=text, backend_label=self.label)


class TamperingBackend:
    """Mock backend whose output for one stage is rewritten by ``tamper(dict)``."""

    label = "tampered"

    def __init__(self, stage, tamper, script=None):
        self.inner = MockBackend(script)
        self.stage = stage
        self.tamper = tamper
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        resp = self.inner.generate(request)
        if request.stage_label != self.stage:
            return resp
        data = json.loads(resp.text)
        self.tamper(data)
        return GenerationResponse(text=json.dumps(data), backend_label=self.label)

    def calls(self, stage):
        return sum(1 for r in self.requests if r.stage_label == stage)


@pytest.fixture
def mock():
    return MockBackend(MockScript(seed=42))


@pytest.fixture
def chain(mock):
    """One full pass through the five agents with the mock."""
    dm = run_domain_agent(GenerationSpec("MS-PS1-4"), mock)
    em = run_evidence_agent(dm, mock)
    sc = run_scenario_agent(em, mock)
    task = run_item_agent(sc, em, mock)
    verdict = run_evaluation_agent(task, dm, mock)
    return dm, em, sc, task, verdict


def make_bundle(tmp_path: Path, mode: str = "pass_all", seed: int = 42, pe: str = "MS-PS1-4"):
    cfg = PipelineConfig(seed=seed, output_dir=tmp_path, created_at=FIXED_TIME)
    return run_pipeline(GenerationSpec(pe), cfg, Backends(MockBackend(MockScript.parse(mode))))


# --------------------------------------------------------------------------
# programmable HTTP stub
# --------------------------------------------------------------------------


class StubServer:
    """Local HTTP server; each request consumes the next scripted action.

    Actions: ("json", status, payload), ("sleep", seconds), ("reset",),
    ("bytes", status, content_type, data). The last action repeats.
    """

    def __init__(self, actions):
        self.actions = list(actions)
        self.bodies = []
        self.headers = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                with stub._lock:
                    stub.bodies.append(json.loads(body))
                    stub.headers.append(dict(self.headers))
                    i = len(stub.bodies) - 1
                action = stub.actions[min(i, len(stub.actions) - 1)]
                try:
                    self._act(action)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def _act(self, action):
                kind = action[0]
                if kind == "sleep":
                    time.sleep(action[1])
                    self._send(200, "application/json", b"{}")
                elif kind == "reset":
                    self.close_connection = True
                    self.connection.shutdown(2)
                elif kind == "json":
                    self._send(action[1], "application/json", json.dumps(action[2]).encode())
                elif kind == "bytes":
                    self._send(action[1], action[2], action[3])

            def _send(self, status, ctype, data):
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def calls(self):
        return len(self.bodies)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def chat_reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


class SleepRecorder:
    def __init__(self):
        self.waits = []

    def __call__(self, seconds):
        self.waits.append(seconds)


# --------------------------------------------------------------------------
# acceptance summary
# --------------------------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    label = marker.args[0]
    outcome = "PASS" if call.excinfo is None else "FAIL"
    prev = _ACCEPTANCE.get(label)
    if prev is None or prev[0] == "PASS":
        _ACCEPTANCE[label] = (outcome, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: (len(s.split()[0]), s)):
        outcome, _ = _ACCEPTANCE[label]
        terminalreporter.write_line(f"{outcome}  {label}")
