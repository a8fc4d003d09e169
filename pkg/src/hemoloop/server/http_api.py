"""HTTP/JSON API on stdlib http.server.

    GET  /api/health
    GET  /api/worklist?status=&partition=
    GET  /api/cases/{id}/bundle
    POST /api/cases/{id}/annotations
    GET  /api/models
    GET  /api/jobs
    POST /api/rounds              (streams ndjson progress, last line = outcome)
    GET  /api/rounds/{id}
    GET  /api/reports/{round}
    GET  /ui/...                  (static assets, no token required)

With a configured token, /api requests must carry "Authorization: Bearer <token>".
Timestamps are ISO-8601 UTC throughout.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from ..errors import (
    BadFilter,
    HemoloopError,
    InferencePending,
    LeakageDetected,
    NotFound,
    ShapeMismatch,
    UnknownCase,
    UnknownPartition,
    UnknownVersion,
)

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".map": "application/json",
    ".png": "image/png",
    ".ico": "image/x-icon",
}

_STATUS_FOR = [
    (BadFilter, 400),
    (ShapeMismatch, 400),
    (InferencePending, 409),
    (NotFound, 404),
    (UnknownCase, 404),
    (UnknownPartition, 404),
    (UnknownVersion, 404),
    (LeakageDetected, 409),
]


class _ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self):
        return self.server.service

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # --- helpers ---------------------------------------------------------------

    def _send_json(self, obj, status: int = 200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, exc: Exception):
        for klass, status in _STATUS_FOR:
            if isinstance(exc, klass):
                self._send_json({"error": type(exc).__name__, "message": str(exc)},
                                status)
                return
        self._send_json({"error": type(exc).__name__, "message": str(exc)}, 500)

    def _authorized(self) -> bool:
        token = self.service.token
        if not token:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {token}"

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        return json.loads(raw)

    # --- routing ----------------------------------------------------------------

    def do_GET(self):
        parsed = urlparse(self.path)
        path = parsed.path
        if path.startswith("/ui"):
            return self._serve_static(path)
        if not self._authorized():
            return self._send_json({"error": "Unauthorized"}, 401)
        try:
            if path == "/api/health":
                return self._send_json({"status": "ok"})
            if path == "/api/worklist":
                query = parse_qs(parsed.query)
                rows = self.service.worklist(
                    status=query.get("status", [None])[0],
                    partition=query.get("partition", [None])[0],
                )
                return self._send_json({"cases": rows})
            match = re.fullmatch(r"/api/cases/([^/]+)/bundle", path)
            if match:
                return self._send_json(self.service.case_bundle(match.group(1)))
            match = re.fullmatch(r"/api/cases/([^/]+)/annotations", path)
            if match:
                return self._send_json(
                    {"annotations": self.service.case_annotations(match.group(1))}
                )
            if path == "/api/models":
                return self._send_json({"models": self.service.models_json()})
            if path == "/api/jobs":
                return self._send_json({"jobs": self.service.registry.list_jobs()})
            match = re.fullmatch(r"/api/rounds/(\d+)", path)
            if match:
                outcome = self.service.registry.get_round(int(match.group(1)))
                if outcome is None:
                    raise NotFound(f"no round {match.group(1)}")
                return self._send_json(outcome)
            match = re.fullmatch(r"/api/reports/(\d+)", path)
            if match:
                return self._send_json(self._report_payload(int(match.group(1))))
            raise NotFound(f"no route {path}")
        except Exception as exc:  # noqa: BLE001
            self._error(exc)

    def do_POST(self):
        parsed = urlparse(self.path)
        path = parsed.path
        if not self._authorized():
            return self._send_json({"error": "Unauthorized"}, 401)
        try:
            match = re.fullmatch(r"/api/cases/([^/]+)/annotations", path)
            if match:
                payload = self._read_body()
                return self._send_json(
                    self.service.submit_annotation(match.group(1), payload), 201
                )
            if path == "/api/rounds":
                return self._stream_round(self._read_body())
            raise NotFound(f"no route {path}")
        except Exception as exc:  # noqa: BLE001
            self._error(exc)

    # --- round streaming -----------------------------------------------------------

    def _stream_round(self, config_json: dict):
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()

        def write_line(obj):
            line = (json.dumps(obj) + "\n").encode()
            self.wfile.write(f"{len(line):x}\r\n".encode() + line + b"\r\n")
            self.wfile.flush()

        try:
            outcome = self.service.run_round_streaming(
                config_json, lambda event: write_line({"progress": event})
            )
            write_line({"outcome": outcome})
        except HemoloopError as exc:
            write_line({"error": type(exc).__name__, "message": str(exc)})
        except Exception as exc:  # noqa: BLE001
            write_line({"error": type(exc).__name__, "message": str(exc)})
        self.wfile.write(b"0\r\n\r\n")
        self.wfile.flush()

    def _report_payload(self, round_id: int) -> dict:
        outcome = self.service.registry.get_round(round_id)
        if outcome is None:
            raise NotFound(f"no round {round_id}")
        csv_path = self.service.registry.data_dir / "rounds" / str(round_id) / "metrics.csv"
        return {
            "round_id": round_id,
            "outcome": outcome,
            "csv": csv_path.read_text() if csv_path.exists() else None,
        }

    # --- static assets ----------------------------------------------------------------

    def _serve_static(self, path: str):
        ui_dir = self.service.ui_dir
        if ui_dir is None:
            return self._send_json({"error": "ui assets not built"}, 404)
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        target = (ui_dir / rel).resolve()
        if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
            return self._send_json({"error": "not found"}, 404)
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type",
                         _CONTENT_TYPES.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class ApiServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, service):
        super().__init__(address, _ApiHandler)
        self.service = service

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
