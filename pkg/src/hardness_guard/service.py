"""Newline-delimited JSON detection gateway around :class:`HardnessMonitor`.

Wire protocol (version 1). One JSON object per line in each direction;
responses on a connection come back in request order.

Requests::

    {"id": <any>, "kind": "query", "user_id": "<1..128 bytes>", "features": [<dim floats>]}
    {"id": <any>, "kind": "admin", "query": "health" | "calibration" | "users" | "user:<id>"}

Every response carries ``"v": 1``, the request's ``id`` (``null`` if the line
could not be parsed) and ``"ok"``. A successful query answers::

    {"v": 1, "id": ..., "ok": true, "kind": "verdict", "user_id": ..., "predicted_label": int,
     "hardness": int, "window_evaluated": bool, "distance": float | null, "flagged": bool}

Failures answer ``{"v": 1, "id": ..., "ok": false, "kind": "error" | "refusal",
"error": {"code": ..., "message": ...}}``. Codes: ``bad_request`` (malformed
line or fields), ``not_found`` (unknown user in an admin query),
``user_rejected`` (flagged user under ``reject_user``), ``internal``.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import signal
import threading
from pathlib import Path

import numpy as np

from .attacks import AttackStream
from .calibration import CalibrationResult
from .monitor import HardnessMonitor, MonitorConfig
from .snapshots import SnapshotModel, SubclassifierSequence, predict_matrix

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_USER_ID_BYTES = 128


class StartupError(RuntimeError):
    """Model and calibration files cannot be served together."""


class BadRequest(ValueError):
    pass


def _sequence_for(model: SnapshotModel, calibration: CalibrationResult) -> SubclassifierSequence:
    seq = calibration.sequence or SubclassifierSequence.full(model.m)
    try:
        seq.check(model.m)
    except ValueError as exc:
        raise StartupError(f"calibration does not fit the model: {exc}") from exc
    if len(seq) != calibration.num_bins:
        raise StartupError(f"calibration has {calibration.num_bins} bins but its sequence has {len(seq)} snapshots")
    return seq


class DetectionService:
    """Request handling, independent of any transport."""

    def __init__(self, model: SnapshotModel, calibration: CalibrationResult, window_policy: str = "tumbling", action_on_flag: str = "flag_only"):
        self.model = model
        self.sequence = _sequence_for(model, calibration)
        self.cfg = MonitorConfig(calibration, calibration.num_s, window_policy, action_on_flag)
        self.monitor = HardnessMonitor(self.cfg)
        self._count_lock = threading.Lock()
        self.queries = 0

    @classmethod
    def from_files(cls, model_path, calibration_path, **kw) -> "DetectionService":
        try:
            model = SnapshotModel.load(model_path)
            cal = CalibrationResult.load(calibration_path)
        except (OSError, ValueError, KeyError) as exc:
            raise StartupError(str(exc)) from exc
        return cls(model, cal, **kw)

    def _reply(self, rid, **body) -> dict:
        return {"v": PROTOCOL_VERSION, "id": rid, **body}

    def _error(self, rid, code: str, message: str, kind: str = "error") -> dict:
        return self._reply(rid, ok=False, kind=kind, error={"code": code, "message": message})

    def handle_line(self, line: str) -> str:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return json.dumps(self._error(None, "bad_request", f"invalid JSON: {exc.msg}"))
        return json.dumps(self.handle_request(req))

    def handle_request(self, req) -> dict:
        if not isinstance(req, dict):
            return self._error(None, "bad_request", "request must be a JSON object")
        rid = req.get("id")
        try:
            kind = req.get("kind")
            if kind == "query":
                return self._query(rid, req)
            if kind == "admin":
                return self._admin(rid, req)
            raise BadRequest(f"unknown request kind {kind!r}; expected 'query' or 'admin'")
        except BadRequest as exc:
            return self._error(rid, "bad_request", str(exc))
        except Exception as exc:  # keep the connection alive whatever happens
            log.exception("request %r failed", rid)
            return self._error(rid, "internal", str(exc))

    def _parse_query(self, req) -> tuple[str, np.ndarray]:
        user = req.get("user_id")
        if not isinstance(user, str) or not user:
            raise BadRequest("user_id must be a non-empty string")
        if len(user.encode("utf-8")) > MAX_USER_ID_BYTES:
            raise BadRequest(f"user_id longer than {MAX_USER_ID_BYTES} bytes")
        feats = req.get("features")
        dim = self.model.dim
        if not isinstance(feats, list) or len(feats) != dim:
            got = len(feats) if isinstance(feats, list) else type(feats).__name__
            raise BadRequest(f"features must be a list of {dim} numbers (expected dim {dim}, got {got})")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in feats):
            raise BadRequest(f"features must be {dim} finite numbers")
        return user, np.array(feats, dtype=np.float64)[None, :]

    def _query(self, rid, req) -> dict:
        user, x = self._parse_query(req)
        if self.cfg.action_on_flag == "reject_user" and self.monitor.is_flagged(user):
            return self._error(rid, "user_rejected", f"user {user!r} is flagged; predictions refused", kind="refusal")
        trace = predict_matrix(self.model, self.sequence, x).labels[0]
        label = int(self.model.predict(x)[0])
        verdict = self.monitor.ingest(user, trace)
        with self._count_lock:
            self.queries += 1
        return self._reply(rid, ok=True, kind="verdict", user_id=user, predicted_label=label, **verdict.to_dict())

    def _admin(self, rid, req) -> dict:
        q = req.get("query")
        if q == "health":
            return self._reply(rid, ok=True, kind="health", status="ok", users=len(self.monitor), queries=self.queries)
        if q == "calibration":
            cal = self.cfg.calibration
            return self._reply(
                rid, ok=True, kind="calibration",
                delta=cal.delta, num_s=cal.num_s, num_bins=cal.num_bins,
                sequence=self.sequence.to_dict(), window_policy=self.cfg.window_policy,
                action_on_flag=self.cfg.action_on_flag,
            )
        if q == "users":
            return self._reply(rid, ok=True, kind="users", users=[u.summary() for u in self.monitor.snapshot_users()])
        if isinstance(q, str) and q.startswith("user:"):
            uid = q[len("user:"):]
            state = self.monitor.user(uid)
            if state is None:
                return self._error(rid, "not_found", f"unknown user {uid!r}")
            return self._reply(rid, ok=True, kind="user", user=state.summary())
        raise BadRequest(f"unknown admin query {q!r}; expected health, calibration, users or user:<id>")

    def snapshot(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "queries": self.queries,
            "calibration": {"delta": self.cfg.calibration.delta, "num_s": self.cfg.num_s, "num_bins": self.cfg.num_bins},
            "users": [u.summary() for u in self.monitor.snapshot_users()],
        }

    def write_snapshot(self, path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), indent=1) + "\n")


async def _connection(service: DetectionService, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            if not line.strip():
                continue
            # off the event loop so other connections make progress; awaiting keeps this connection in order
            out = await asyncio.to_thread(service.handle_line, line.decode("utf-8", errors="replace"))
            writer.write(out.encode("utf-8") + b"\n")
            await writer.drain()
    except (ConnectionResetError, BrokenPipeError):
        pass
    finally:
        writer.close()


async def serve(
    service: DetectionService,
    host: str = "127.0.0.1",
    port: int = 8765,
    snapshot_path=None,
    stop: asyncio.Event | None = None,
    ready=None,
) -> None:
    """Run until ``stop`` is set (or SIGINT/SIGTERM), then write the user-state snapshot.

    ``ready`` is called with the bound ``(host, port)`` once listening.
    """
    stop = stop or asyncio.Event()
    open_conns: set[asyncio.Task] = set()

    def accept(reader, writer):
        task = asyncio.ensure_future(_connection(service, reader, writer))
        open_conns.add(task)
        task.add_done_callback(open_conns.discard)

    server = await asyncio.start_server(accept, host, port)
    loop = asyncio.get_running_loop()
    installed = []
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
                installed.append(sig)
            except (NotImplementedError, RuntimeError):
                pass
    bound = server.sockets[0].getsockname()[:2]
    log.info("serving on %s:%s", *bound)
    if ready is not None:
        ready(bound)
    try:
        async with server:
            await stop.wait()
        for task in list(open_conns):
            task.cancel()
        await asyncio.gather(*open_conns, return_exceptions=True)
    finally:
        for sig in installed:
            loop.remove_signal_handler(sig)
        if snapshot_path is not None:
            service.write_snapshot(snapshot_path)
            log.info("wrote user-state snapshot to %s", snapshot_path)


def query_records(stream: AttackStream, user_id: str, id_prefix: str = "") -> list[dict]:
    return [
        {"id": f"{id_prefix}{i}", "kind": "query", "user_id": user_id, "features": [float(v) for v in x]}
        for i, x in enumerate(stream.features)
    ]


async def _replay(host: str, port: int, records: list[dict], window: int) -> list[dict]:
    reader, writer = await asyncio.open_connection(host, port, limit=2**24)
    out = []
    try:
        for start in range(0, len(records), window):
            chunk = records[start : start + window]
            writer.write(b"".join(json.dumps(r).encode("utf-8") + b"\n" for r in chunk))
            await writer.drain()
            for _ in chunk:
                line = await reader.readline()
                if not line:
                    raise ConnectionError("server closed the connection mid-replay")
                out.append(json.loads(line))
    finally:
        writer.close()
        await writer.wait_closed()
    return out


def replay(host: str, port: int, records: list[dict], window: int = 64) -> list[dict]:
    """Send request records over one connection (pipelined ``window`` at a time); return responses in order."""
    return asyncio.run(_replay(host, port, records, window))


def replay_file(host: str, port: int, stream_csv, user_id: str, window: int = 64) -> list[dict]:
    """Replay an attack-stream CSV as queries from a single user."""
    return replay(host, port, query_records(AttackStream.load_csv(stream_csv), user_id), window)
