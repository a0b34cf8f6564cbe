"""JSON-over-HTTP service for online search and ingestion.

Endpoints: POST /v1/search, POST /v1/trajectories, GET /v1/stats. The
handler methods on BankService return (status, payload) and carry all the
logic; the HTTP layer only decodes and encodes.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from expbank.abstract import AbstractionConfig, Judge, ingest
from expbank.core import state_from_record, validate_trajectory
from expbank.embed import Embedder
from expbank.errors import (
    ConfigError,
    DimensionMismatch,
    DuplicateTrajectoryId,
    EmbedderUnavailable,
    InconsistentOutcome,
    MalformedRecord,
    NonUnitNorm,
    UnknownViewpoint,
)
from expbank.index import ExperienceBank
from expbank.search import SearchParams, deep_search, deep_wide_search, format_guidance, wide_search

logger = logging.getLogger(__name__)

LISTEN_ENV = "EXPBANK_LISTEN"
DEFAULT_LISTEN = "127.0.0.1:8080"
MODES = ("wide", "deep", "deep_wide")


def _error(status: int, message: str, **extra) -> tuple[int, dict]:
    return status, {"error": message, **extra}


class BankService:
    def __init__(
        self,
        bank: ExperienceBank,
        embedder: Embedder,
        judge: Judge | None = None,
        config: AbstractionConfig | None = None,
    ):
        self.bank = bank
        self.embedder = embedder
        self.judge = judge
        self.config = config or AbstractionConfig(threshold=bank.config.threshold, dim=bank.dim)
        self._ingest_lock = threading.Lock()
        self._known_ids = {e.trajectory_id for e in bank.experiences}

    def handle_search(self, body: Any) -> tuple[int, dict]:
        if not isinstance(body, dict):
            return _error(400, "request body must be an object")
        mode = body.get("mode", "deep_wide")
        viewpoints = body.get("viewpoints")
        k = body.get("k", 3)
        if mode not in MODES:
            return _error(400, f"unknown mode {mode!r}")
        if not isinstance(viewpoints, list) or not viewpoints or not all(isinstance(v, str) for v in viewpoints):
            return _error(400, "viewpoints must be a non-empty list of ids")
        if isinstance(k, bool) or not isinstance(k, int) or k < 1:
            return _error(400, "k must be a positive integer")
        if mode == "wide" and len(viewpoints) != 1:
            return _error(400, "mode=wide takes exactly one viewpoint")
        try:
            state = state_from_record(body.get("state"))
            snap = self.bank.snapshot()
            if mode == "wide":
                result = wide_search(snap, state, viewpoints[0], k, self.embedder)
            elif mode == "deep":
                result = deep_search(snap, state, viewpoints, self.embedder)
            else:
                params = SearchParams(k=k, rounds=len(viewpoints), viewpoint_sequence=tuple(viewpoints))
                result = deep_wide_search(snap, state, params, self.embedder)
        except (MalformedRecord, UnknownViewpoint, ConfigError) as exc:
            return _error(400, str(exc))
        except (DimensionMismatch, NonUnitNorm) as exc:
            return _error(409, str(exc))
        except EmbedderUnavailable as exc:
            return _error(503, str(exc))
        return 200, {"items": result.to_records(), "rendered": format_guidance(result)}

    def handle_ingest(self, body: Any) -> tuple[int, dict]:
        if not isinstance(body, list):
            return _error(400, "request body must be a list of trajectory records")
        trajectories = []
        for i, rec in enumerate(body):
            try:
                trajectories.append(validate_trajectory(rec))
            except (MalformedRecord, InconsistentOutcome) as exc:
                return _error(400, f"record {i}: {exc}")
        if trajectories and self.judge is None:
            return _error(503, "no judge configured for ingestion")
        with self._ingest_lock:
            try:
                stats = ingest(self.bank, trajectories, self.config, self.judge, self.embedder, self._known_ids)
            except DuplicateTrajectoryId as exc:
                return _error(400, str(exc), trajectory_id=exc.trajectory_id)
            except EmbedderUnavailable as exc:
                return _error(503, str(exc))
            except (DimensionMismatch, NonUnitNorm) as exc:
                return _error(409, str(exc))
        if trajectories and stats.failed_trajectories == len(trajectories):
            return _error(503, "judge unavailable", stats=stats.to_dict())
        return 202, stats.to_dict()

    def handle_stats(self) -> tuple[int, dict]:
        return 200, self.bank.stats()


class _Handler(BaseHTTPRequestHandler):
    service: BankService
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; without this, keep-alive
    # clients stall on delayed ACKs
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        return json.loads(raw.decode("utf-8"))

    def do_GET(self):
        if self.path == "/v1/stats":
            self._send(*self.service.handle_stats())
        else:
            self._send(*_error(404, f"no route {self.path}"))

    def do_POST(self):
        routes = {"/v1/search": self.service.handle_search, "/v1/trajectories": self.service.handle_ingest}
        handler = routes.get(self.path)
        if handler is None:
            self._send(*_error(404, f"no route {self.path}"))
            return
        try:
            body = self._body()
        except (ValueError, UnicodeDecodeError) as exc:
            self._send(*_error(400, f"malformed body: {exc}"))
            return
        try:
            self._send(*handler(body))
        except Exception as exc:  # keep the server alive; report and move on
            logger.exception("unhandled error on %s", self.path)
            self._send(*_error(500, f"internal error: {exc}"))


def parse_listen(addr: str | None) -> tuple[str, int]:
    addr = addr or os.environ.get(LISTEN_ENV) or DEFAULT_LISTEN
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"listen address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def make_server(service: BankService, listen: str | None = None) -> ThreadingHTTPServer:
    host, port = parse_listen(listen)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
