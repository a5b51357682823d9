"""Single-threaded HTTP server exposing an adapter as a hard-label oracle.

POST /predict takes {"points": [[x, y, z], ...]} and answers {"label": N};
GET /health answers {"classes": N}. Requests are handled strictly one at a
time, which keeps query ordering deterministic. Responses never carry scores,
probabilities, or gradients; adapter failures surface as an opaque 500.
"""

from __future__ import annotations

import json
import logging
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from .adapters import VictimAdapter

logger = logging.getLogger("victim_bridge")

MIN_POINTS = 4


def parse_points(raw: bytes):
    """Validate a /predict body; returns an (n, 3) float64 array or raises."""
    payload = json.loads(raw)
    if not isinstance(payload, dict) or "points" not in payload:
        raise ValueError("body must be a JSON object with a 'points' field")
    points = np.asarray(payload["points"], dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("'points' must be an n x 3 array")
    if points.shape[0] < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points")
    if not np.all(np.isfinite(points)):
        raise ValueError("coordinates must be finite")
    return points


class OracleHandler(BaseHTTPRequestHandler):
    # HTTP/1.0 close-per-request: a lingering keep-alive connection would
    # monopolize the single-threaded server between queries
    protocol_version = "HTTP/1.0"

    def log_message(self, *args):  # route through logging, not stderr writes
        logger.debug("%s", args)

    def _reply(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            body = json.dumps({"classes": int(self.server.adapter.num_classes)})
            self._reply(200, body.encode("ascii"))
        else:
            self._reply(404, b'{"error": "not found"}')

    def do_POST(self):
        if self.path != "/predict":
            self._reply(404, b'{"error": "not found"}')
            return
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            points = parse_points(raw)
        except (ValueError, json.JSONDecodeError) as exc:
            self._reply(400, json.dumps({"error": str(exc)}).encode("ascii"))
            return
        try:
            label = int(self.server.adapter.classify(points))
        except Exception:
            logger.exception("adapter failure")
            self._reply(500, b'{"error": "victim failure"}')
            return
        self.server.queries += 1
        if self.server.queries % 1000 == 0:
            logger.info("served %d queries", self.server.queries)
        self._reply(200, json.dumps({"label": label}).encode("ascii"))


class BridgeServer(HTTPServer):
    """HTTPServer bound to one adapter, counting completed queries."""

    def __init__(self, adapter: VictimAdapter, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), OracleHandler)
        self.adapter = adapter
        self.queries = 0

    @property
    def endpoint(self) -> str:
        return f"http://{self.server_address[0]}:{self.server_address[1]}"


def serve(adapter: VictimAdapter, host: str = "127.0.0.1", port: int = 8008) -> None:
    """Serve until interrupted. One request at a time, by design."""
    server = BridgeServer(adapter, host, port)
    logger.info("serving hard-label oracle on %s", server.endpoint)
    try:
        server.serve_forever()
    finally:
        logger.info("served %d queries total", server.queries)
        server.server_close()
