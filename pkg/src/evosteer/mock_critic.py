"""Threaded HTTP mock of the critic service.

By default it answers like :class:`~evosteer.verifier.StubCritic`. Tests can
queue scripted replies per route; each queued item is one of::

    {"json": {...}}            reply 200 with this body
    {"status": 503, "body": ""} reply with an error status
    {"raw": "text"}            reply 200 with a non-JSON body
    {"delay": 2.0}             sleep, then fall through to the default answer
"""

from __future__ import annotations

import json
import threading
import time
from collections import defaultdict, deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .verifier import CriticError, StubCritic

ROUTES = ("/objective", "/reflect")


class MockCriticServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 success_radius: float = 0.15, wrong_first: bool = False):
        self.stub = StubCritic(success_radius, wrong_first)
        self.script: dict[str, deque] = defaultdict(deque)
        self.requests: list[tuple[str, dict]] = []
        self.headers: list[dict[str, str]] = []
        self._lock = threading.Lock()
        self._httpd = ThreadingHTTPServer((host, port), self._handler())
        self._httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def enqueue(self, route: str, *items: dict) -> None:
        with self._lock:
            self.script[route].extend(items)

    def start(self) -> "MockCriticServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        # shutdown() waits for serve_forever, so only call it when serving
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join()
            self._thread = None
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, body: bytes, ctype="application/json"):
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                try:
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def do_POST(self):
                if self.path not in ROUTES:
                    self._send(404, b'{"error": "unknown route"}')
                    return
                n = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(n) or b"null")
                    if not isinstance(payload, dict):
                        raise ValueError("body must be a JSON object")
                except ValueError as exc:
                    self._send(400, json.dumps({"error": str(exc)}).encode())
                    return
                with server._lock:
                    server.requests.append((self.path, payload))
                    server.headers.append(dict(self.headers))
                    item = server.script[self.path].popleft() if server.script[self.path] else None
                if item is not None:
                    if "delay" in item:
                        time.sleep(item["delay"])
                    elif "status" in item:
                        self._send(item["status"], item.get("body", "").encode())
                        return
                    elif "raw" in item:
                        self._send(200, item["raw"].encode(), "text/plain")
                        return
                    else:
                        self._send(200, json.dumps(item["json"]).encode())
                        return
                try:
                    if self.path == "/objective":
                        out = server.stub.objective(payload)
                    else:
                        out = server.stub.reflect(payload)
                except (CriticError, KeyError, ValueError) as exc:
                    self._send(422, json.dumps({"error": str(exc)}).encode())
                    return
                self._send(200, json.dumps(out).encode())

        return Handler
