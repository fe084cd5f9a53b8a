"""HTTP bridge for interactive approval.

A run publishes each approval batch and blocks until a client posts the
verdict.  Clients poll:

    GET  /pending   -> the waiting batch as JSON, or 204 when none
    POST /decision  <- {"batch_id": int, "approve": bool}; 409 on mismatch
    GET  /trace     -> ordered list of run events observed so far

Responses carry permissive CORS headers so a browser console served from
another origin can talk to a local run.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .runtime import ApprovalBatch


class HttpApprover:
    """Approver that parks each batch until an HTTP client decides it."""

    def __init__(self):
        self._cond = threading.Condition()
        self._batch: ApprovalBatch | None = None
        self._decision: bool | None = None
        self._closed = False
        self._trace: list[dict] = []

    # -- run-loop side -------------------------------------------------------

    def decide(self, batch: ApprovalBatch) -> bool:
        with self._cond:
            self._batch = batch
            self._decision = None
            self._cond.notify_all()
            while self._decision is None and not self._closed:
                self._cond.wait()
            self._batch = None
            # a closed approver rejects: never dispatch without a verdict
            return bool(self._decision)

    def record(self, event: dict) -> None:
        """Trace hook; pass as ``run(..., trace=approver.record)``."""
        with self._cond:
            self._trace.append(event)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- HTTP side -----------------------------------------------------------

    def pending_json(self) -> dict | None:
        with self._cond:
            return self._batch.as_json() if self._batch is not None else None

    def submit(self, batch_id: int, approve: bool) -> bool:
        """Deliver a verdict; False when no batch with that id is waiting."""
        with self._cond:
            if self._batch is None or self._batch.batch_id != batch_id:
                return False
            self._decision = approve
            self._cond.notify_all()
            return True

    def trace_json(self) -> list[dict]:
        with self._cond:
            return list(self._trace)


class ApprovalHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, approver: HttpApprover):
        super().__init__(addr, _Handler)
        self.approver = approver


class _Handler(BaseHTTPRequestHandler):
    server: ApprovalHTTPServer

    def log_message(self, fmt, *args):  # keep stdout clean for CLI output
        pass

    def _send(self, status: int, payload=None) -> None:
        body = b"" if payload is None else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        if body:
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
        else:
            self.send_header("Content-Length", "0")
        self.end_headers()
        if body:
            self.wfile.write(body)

    def do_OPTIONS(self):
        self._send(204)

    def do_GET(self):
        approver = self.server.approver
        if self.path == "/pending":
            batch = approver.pending_json()
            if batch is None:
                self._send(204)
            else:
                self._send(200, batch)
        elif self.path == "/trace":
            self._send(200, approver.trace_json())
        else:
            self._send(404, {"error": f"no such path {self.path}"})

    def do_POST(self):
        if self.path != "/decision":
            self._send(404, {"error": f"no such path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            batch_id = payload["batch_id"]
            approve = payload["approve"]
            if not isinstance(batch_id, int) or isinstance(batch_id, bool) \
                    or not isinstance(approve, bool):
                raise ValueError("batch_id must be an int and approve a bool")
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            self._send(400, {"error": f"malformed decision: {exc}"})
            return
        if self.server.approver.submit(batch_id, approve):
            self._send(200, {"ok": True})
        else:
            self._send(409, {"error": f"batch {batch_id} is not awaiting a decision"})


def start_server(approver: HttpApprover, port: int,
                 host: str = "127.0.0.1") -> ApprovalHTTPServer:
    """Start the approval endpoint on a daemon thread and return it.

    Port 0 picks a free port; read it back from ``server.server_address``.
    """
    server = ApprovalHTTPServer((host, port), approver)
    thread = threading.Thread(target=server.serve_forever, daemon=True,
                              name="termflow-approval-http")
    thread.start()
    return server
