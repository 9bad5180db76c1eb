"""Local HTTP server speaking the chat-completions wire format, for tests and dry runs."""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable

# responder(body, headers) -> (status, reply text); the text is wrapped as a completion when status == 200
Responder = Callable[[dict, dict], tuple[int, str]]


def completion_payload(text: str, model: str = "mock") -> dict:
    return {
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    }


def fixed(text: str) -> Responder:
    return lambda body, headers: (200, text)


def scripted_statuses(statuses: Iterable[int], text: str) -> Responder:
    """Reply with each status in turn (the last one repeats); 200 carries ``text``."""
    seq = list(statuses)
    lock = threading.Lock()
    state = {"n": 0}

    def respond(body, headers):
        with lock:
            status = seq[min(state["n"], len(seq) - 1)]
            state["n"] += 1
        return status, text if status == 200 else json.dumps({"error": {"message": f"status {status}"}})

    return respond


class MockChatServer:
    """``with MockChatServer(fixed("[Toy Story]")) as srv: ... srv.base_url``"""

    def __init__(self, responder: Responder, raw_body: bool = False):
        self.responder = responder
        self.raw_body = raw_body
        self.requests: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw.decode("utf-8"))
                except ValueError:
                    body = {"_raw": raw.decode("utf-8", "replace")}
                hdrs = {k.lower(): v for k, v in self.headers.items()}
                outer.requests.append({"path": self.path, "body": body, "headers": hdrs})
                if not self.path.rstrip("/").endswith("/chat/completions"):
                    status, text = 404, json.dumps({"error": {"message": "not found"}})
                else:
                    status, text = outer.responder(body, hdrs)
                if status == 200 and not outer.raw_body:
                    out = json.dumps(completion_payload(text, body.get("model", "mock"))).encode("utf-8")
                else:
                    out = text.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockChatServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
