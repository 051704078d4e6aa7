import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from dynbeta.data import SynthConfig, generate_questions


@pytest.fixture(scope="session")
def small_questions():
    questions, true_reward = generate_questions(SynthConfig(num_questions=120, feature_dim=8))
    return questions


@pytest.fixture(scope="session")
def synth_500():
    return generate_questions(SynthConfig())


class ScriptedJudge:
    """Local pairwise-judge endpoint. ``script`` is a list of (status, body) replies;
    once exhausted, ``default`` is returned for every further request."""

    def __init__(self, script=(), default=(200, {"logit_first": 0.0, "logit_second": 0.0})):
        self.script = list(script)
        self.default = default
        self.requests = []
        self.lock = threading.Lock()
        judge = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with judge.lock:
                    judge.requests.append({"payload": payload, "headers": dict(self.headers)})
                    status, body = judge.script.pop(0) if judge.script else judge.default
                if callable(body):
                    body = body(payload)
                raw = body if isinstance(body, (bytes, str)) else json.dumps(body)
                raw = raw.encode() if isinstance(raw, str) else raw
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/judge"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def scripted_judge():
    return ScriptedJudge
