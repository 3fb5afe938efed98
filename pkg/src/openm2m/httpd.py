"""Socket adapter for the gateway.

``GatewayCore.route`` is a pure function from request to response; this
module is the only place that touches sockets.  CORS headers are sent on
everything so a browser page can talk to a local gateway directly.
"""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

from .gateway import GatewayCore, HttpRequest

_CORS_HEADERS = {
    "Access-Control-Allow-Origin": "*",
    "Access-Control-Allow-Methods": "GET, POST, DELETE, OPTIONS",
    "Access-Control-Allow-Headers": "Content-Type, Accept",
}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    core: GatewayCore  # set on the subclass built in make_server

    def _respond(self) -> None:
        split = urlsplit(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        request = HttpRequest(
            method=self.command,
            path=split.path,
            headers={k: v for k, v in self.headers.items()},
            body=body,
            query=dict(parse_qsl(split.query)),
        )
        response = self.core.route(request)
        self.send_response(response.status)
        self.send_header("Content-Type", response.content_type)
        self.send_header("Content-Length", str(len(response.body)))
        for name, value in _CORS_HEADERS.items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(response.body)

    do_GET = do_POST = do_DELETE = _respond

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self.send_header("Content-Length", "0")
        for name, value in _CORS_HEADERS.items():
            self.send_header(name, value)
        self.end_headers()

    def log_message(self, fmt: str, *args) -> None:
        pass  # quiet by default; the event log is the record


def make_server(core: GatewayCore, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    """Bind a threading HTTP server to the core; port 0 picks a free one."""
    handler = type("BoundHandler", (_Handler,), {"core": core})
    return ThreadingHTTPServer((host, port), handler)


def serve_background(core: GatewayCore, host: str = "127.0.0.1",
                     port: int = 0) -> tuple[ThreadingHTTPServer, threading.Thread]:
    """Start a server on a daemon thread; returns it with its thread."""
    server = make_server(core, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
