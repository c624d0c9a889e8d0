from __future__ import annotations

import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from sqi.core import IllusionQuery, ImageRef

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def image() -> ImageRef:
    return ImageRef.from_path(FIXTURES / "poggendorff.png")


@pytest.fixture
def make_query(image):
    def _make(question="Are the red segments collinear behind the rectangle?", item_id="q1", gt=None):
        return IllusionQuery(item_id, image, question, gt)

    return _make


@pytest.fixture
def occluded_text() -> str:
    return (FIXTURES / "occluded_alignment_trace.txt").read_text(encoding="utf-8").rstrip("\n")


class NetworkUsed(AssertionError):
    pass


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any socket connection; yields the list of attempts."""
    attempts: list = []

    def refuse(self, address, *args, **kwargs):
        attempts.append(address)
        raise NetworkUsed(f"network access attempted: {address!r}")

    def refuse_create(address, *args, **kwargs):
        attempts.append(address)
        raise NetworkUsed(f"network access attempted: {address!r}")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse_create)
    yield attempts


class StubState:
    """Programmable chat-completions endpoint.

    ``statuses`` is consumed one per request (then 200 forever); the reply
    text comes from ``responder(user_text)``.
    """

    def __init__(self):
        self.statuses: list[int] = []
        self.responder = lambda user_text: "FINAL: YES"
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.raw_body: bytes | None = None
        self.lock = threading.Lock()


def _make_handler(state: StubState):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            with state.lock:
                state.requests.append(body)
                state.headers.append(dict(self.headers))
                status = state.statuses.pop(0) if state.statuses else 200
            if self.path != "/v1/chat/completions":
                status = 404
            if status != 200:
                payload = json.dumps({"error": {"message": "stub failure"}}).encode()
            elif state.raw_body is not None:
                payload = state.raw_body
            else:
                user = body["messages"][1]["content"][0]["text"]
                text = state.responder(user)
                payload = json.dumps(
                    {
                        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
                        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
                    }
                ).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    return Handler


@pytest.fixture
def stub_server():
    state = StubState()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(state))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.endpoint = f"http://127.0.0.1:{server.server_address[1]}/v1"
    yield state
    server.shutdown()
    server.server_close()


def corpus_responder(user_text: str) -> str:
    """Answer corpus questions from the corpus scripted table (by substring)."""
    table = json.loads((CORPUS / "table.json").read_text(encoding="utf-8"))
    for key, value in table.items():
        if key.startswith("~") and key[1:] in user_text:
            return value
    return "no idea"


# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
