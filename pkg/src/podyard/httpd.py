"""Minimal JSON-over-HTTP server plumbing shared by the agent and control plane.

Routes are (method, path regex) pairs. Handlers receive the regex match,
the parsed query, and the decoded JSON body (if any) and return
(status, payload); dict payloads are sent as JSON, strings as plain text.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

log = logging.getLogger(__name__)


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class JsonHttpServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._routes: list[tuple[str, re.Pattern, object]] = []
        handler = self._make_handler()
        self._server = ThreadingHTTPServer((host, port), handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def route(self, method: str, pattern: str, handler) -> None:
        self._routes.append((method.upper(), re.compile(f"^{pattern}$"), handler))

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"http-{self.port}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        # shutdown() blocks forever unless serve_forever is actually running,
        # so skip it when the server never started (e.g. failed registration).
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join(timeout=5)
            self._thread = None
        self._server.server_close()

    def _dispatch(self, method: str, path: str, query: dict, body):
        for route_method, pattern, handler in self._routes:
            if route_method != method:
                continue
            match = pattern.match(path)
            if match:
                return handler(match, query, body)
        raise HttpError(404, f"no route for {method} {path}")

    def _make_handler(self):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("http %s", fmt % args)

            def _respond(self, status: int, payload, content_type=None):
                if isinstance(payload, (dict, list)):
                    data = json.dumps(payload).encode()
                    content_type = content_type or "application/json"
                else:
                    data = str(payload).encode()
                    content_type = content_type or "text/plain; charset=utf-8"
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _handle(self, method: str):
                parsed = urlparse(self.path)
                query = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
                body = None
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    raw = self.rfile.read(length)
                    content_type = (self.headers.get("Content-Type") or "").lower()
                    try:
                        body = json.loads(raw)
                    except json.JSONDecodeError:
                        if "json" in content_type:
                            self._respond(400, {"error": "request body is not valid JSON"})
                            return
                        # Raw text bodies (e.g. manifest uploads) pass through.
                        body = raw.decode("utf-8", "replace")
                try:
                    status, payload = outer._dispatch(method, parsed.path, query, body)
                except HttpError as exc:
                    self._respond(exc.status, {"error": exc.message})
                except Exception as exc:  # handler bug: surface, don't hang the client
                    log.exception("handler for %s %s failed", method, parsed.path)
                    self._respond(500, {"error": f"{type(exc).__name__}: {exc}"})
                else:
                    self._respond(status, payload)

            def do_GET(self):
                self._handle("GET")

            def do_POST(self):
                self._handle("POST")

            def do_DELETE(self):
                self._handle("DELETE")

        return Handler
