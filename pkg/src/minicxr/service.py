"""Preference-collection HTTP service.

Serves pending report pairs from a file queue and appends rater choices to
an append-only line-delimited log. Appends are durable before the request
is acknowledged, so the log survives restarts with zero loss; answered
pairs are reconstructed from the log on startup.

Endpoints (HTTP/1.1, JSON bodies, UTF-8):
    GET  /api/next-pair[?rater=ID] -> pair payload, or 204 when empty
    POST /api/preference {pair_id, choice, rater_id} -> 200 / 400 / 404 / 409
    GET  /api/stats -> {total, per_rater, queue_depth}
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .preferences import (PendingPair, PreferenceRecord, append_record,
                          list_pending_pairs, now_ms, read_pair_file,
                          read_records)

DEFAULT_BIND = ("127.0.0.1", 8750)


class FeedbackStore:
    """Queue-dir plus log-file state shared by request handlers."""

    def __init__(self, queue_dir, log_path):
        self.queue_dir = Path(queue_dir)
        self.log_path = Path(log_path)
        self.lock = threading.Lock()
        self.answered: set[str] = set()
        self.served: dict[str, set[str]] = {}
        self._recover()

    def _recover(self) -> None:
        """Rebuild the answered set by matching log records to pair files."""
        records = read_records(self.log_path)
        if not records:
            return
        keys = {(r.study_id, r.report_a, r.report_b) for r in records}
        for path in list_pending_pairs(self.queue_dir):
            pair = read_pair_file(path)
            if (pair.study_id, pair.report_a, pair.report_b) in keys:
                self.answered.add(pair.pair_id)

    def pending_pairs(self) -> list[PendingPair]:
        out = []
        for path in list_pending_pairs(self.queue_dir):
            pair = read_pair_file(path)
            if pair.pair_id not in self.answered:
                out.append(pair)
        return out

    def next_pair(self, rater: str) -> PendingPair | None:
        with self.lock:
            for pair in self.pending_pairs():
                if rater in self.served.get(pair.pair_id, set()):
                    continue
                self.served.setdefault(pair.pair_id, set()).add(rater)
                return pair
        return None

    def submit(self, pair_id: str, choice: str, rater_id: str) -> int:
        """Returns the HTTP status for a preference submission."""
        if choice not in ("A", "B", "skip") or not pair_id or not rater_id:
            return 400
        with self.lock:
            path = self.queue_dir / f"{pair_id}.json"
            if not path.exists():
                return 404
            if pair_id in self.answered:
                return 409
            pair = read_pair_file(path)
            record = PreferenceRecord(
                study_id=pair.study_id, prompt=pair.prompt,
                report_a=pair.report_a, report_b=pair.report_b,
                choice=choice, rater_id=rater_id, timestamp_ms=now_ms())
            append_record(self.log_path, record)   # durable before the ack
            self.answered.add(pair_id)
            return 200

    def stats(self) -> dict:
        records = read_records(self.log_path)
        per_rater: dict[str, int] = {}
        for r in records:
            per_rater[r.rater_id] = per_rater.get(r.rater_id, 0) + 1
        return {"total": len(records), "per_rater": per_rater,
                "queue_depth": len(self.pending_pairs())}


def _make_handler(store: FeedbackStore):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: dict | None = None):
            body = b"" if payload is None else json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.end_headers()
            if body:
                self.wfile.write(body)

        def do_OPTIONS(self):
            self._send(200, {})

        def do_GET(self):
            path, _, query = self.path.partition("?")
            if path == "/api/next-pair":
                rater = "anon"
                for part in query.split("&"):
                    if part.startswith("rater="):
                        rater = part[len("rater="):] or "anon"
                pair = store.next_pair(rater)
                if pair is None:
                    self._send(204)
                else:
                    self._send(200, {
                        "pair_id": pair.pair_id, "study_id": pair.study_id,
                        "prompt": pair.prompt, "image": pair.image_pgm_b64,
                        "report_a": pair.report_a, "report_b": pair.report_b})
            elif path == "/api/stats":
                self._send(200, store.stats())
            else:
                self._send(404, {"error": f"unknown path {path}"})

        def do_POST(self):
            if self.path.partition("?")[0] != "/api/preference":
                self._send(404, {"error": "unknown path"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                pair_id = body["pair_id"]
                choice = body["choice"]
                rater_id = body["rater_id"]
            except (ValueError, KeyError, json.JSONDecodeError):
                self._send(400, {"error": "malformed body"})
                return
            status = store.submit(str(pair_id), str(choice), str(rater_id))
            messages = {200: "recorded", 400: "invalid submission",
                        404: f"unknown pair-id {pair_id}", 409: "already answered"}
            self._send(status, {"status": messages[status], "pair_id": pair_id})

    return Handler


class FeedbackService:
    """Embeddable server; `serve_forever` blocks, `start` runs a thread."""

    def __init__(self, queue_dir, log_path, host: str = DEFAULT_BIND[0],
                 port: int = DEFAULT_BIND[1]):
        self.store = FeedbackStore(queue_dir, log_path)
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(self.store))
        self.thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "FeedbackService":
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self.thread:
            self.thread.join(timeout=5)

    def serve_forever(self) -> None:
        self.httpd.serve_forever()
