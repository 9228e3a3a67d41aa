"""WebSocket gateway: one streaming avatar pipeline per connected client.

The service owns a single denoiser loaded at startup and shares it read-only
across sessions; each accepted websocket gets its own AvatarSession, a
LiveSource fed by client messages, and a pipeline thread that paces frames at
the plan rate. All traffic is JSON text frames; pixel payloads ride base64.
"""

from __future__ import annotations

import asyncio
import base64
import json
import os
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from queue import Empty, Full, Queue

import numpy as np
import torch
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from ..engine import AvatarSession, LiveSource, PlanError, SessionError, plan_chunks, run_pipeline
from ..quant import QuantSpec, QuantizedDenoiser
from ..sched import build_schedule
from ..training.loop import load_denoiser
from ..world.clips import LABEL_IDS
from ..world.render import AvatarIdentity

PLAN_FIELDS = ("n", "f_first", "f_steady", "steps", "fps_target", "f_max", "fast_transition")
OUTBOUND_CAPACITY = 512          # frames a slow client may leave unread before its pipeline stalls
AUTO_SPEAK_ENERGY = 0.15
AUTO_IDLE_ENERGY = 0.02


class GatewayError(RuntimeError):
    pass


@dataclass
class GatewayConfig:
    checkpoint: str
    quant_spec: str | None = None
    host: str = "127.0.0.1"
    port: int = 8787
    max_sessions: int = 4
    telemetry_dir: str | None = None

    @classmethod
    def from_sources(cls, path: str | Path | None = None, env: dict | None = None) -> "GatewayConfig":
        """Config file first, then CHECKPOINT / QUANTSPEC / PORT env overrides."""
        env = os.environ if env is None else env
        data: dict = {}
        if path is not None:
            try:
                data.update(json.loads(Path(path).read_text()))
            except (OSError, ValueError) as exc:
                raise GatewayError(f"config file {path}: {exc}") from exc
        if env.get("CHECKPOINT"):
            data["checkpoint"] = env["CHECKPOINT"]
        if env.get("QUANTSPEC"):
            data["quant_spec"] = env["QUANTSPEC"]
        if env.get("PORT"):
            try:
                data["port"] = int(env["PORT"])
            except ValueError as exc:
                raise GatewayError(f"PORT {env['PORT']!r} is not an integer") from exc
        if "checkpoint" not in data:
            raise GatewayError("no checkpoint configured (config file or CHECKPOINT)")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise GatewayError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)


class Gateway:
    """Shared server state: the model, the session slots, aggregate metrics."""

    def __init__(self, config: GatewayConfig):
        if not Path(config.checkpoint).exists():
            raise GatewayError(f"checkpoint not found: {config.checkpoint}")
        self.config = config
        self.net, self.meta = load_denoiser(config.checkpoint)
        self.net.eval().requires_grad_(False)
        self.sched = build_schedule(int(self.meta.get("num_steps", 1000)))
        self.quant_net = None
        if config.quant_spec is not None:
            if not Path(config.quant_spec).exists():
                raise GatewayError(f"quantization spec not found: {config.quant_spec}")
            self.quant_net = QuantizedDenoiser(self.net, QuantSpec.load(config.quant_spec))
        self.slots = threading.BoundedSemaphore(config.max_sessions)
        self.lock = threading.Lock()
        self.sessions_started = 0
        self.sessions_active = 0
        self.totals = {"frames": 0, "chunks": 0, "violations": 0}
        self.last_session: dict | None = None

    def try_acquire(self) -> str | None:
        """A session slot id, or None when the server is at capacity."""
        if not self.slots.acquire(blocking=False):
            return None
        with self.lock:
            self.sessions_started += 1
            self.sessions_active += 1
            return f"s{self.sessions_started}"

    def release(self, sid: str, summary=None) -> None:
        with self.lock:
            self.sessions_active -= 1
            if summary is not None:
                self.totals["frames"] += summary.frames
                self.totals["chunks"] += summary.chunks
                self.totals["violations"] += summary.violations
                self.last_session = {
                    "session": sid,
                    "chunks": summary.chunks,
                    "frames": summary.frames,
                    "first_frame_ms": summary.first_frame_ms,
                    "steady_fps": summary.steady_fps,
                    "violations": summary.violations,
                }
        self.slots.release()

    def metrics(self) -> dict:
        with self.lock:
            return {
                "sessions_started": self.sessions_started,
                "sessions_active": self.sessions_active,
                **self.totals,
                "last_session": self.last_session,
            }

    def wait_idle(self, timeout_s: float = 30.0) -> None:
        """Blocks until every pipeline thread has drained and released."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            with self.lock:
                if self.sessions_active == 0:
                    return
            time.sleep(0.02)

    def build_session(self, msg: dict) -> AvatarSession:
        """An AvatarSession from a validated start message."""
        plan_kw = dict(msg.get("plan") or {})
        if "steps" in msg:
            plan_kw["steps"] = msg["steps"]
        net = self.net
        if msg.get("quantized"):
            if self.quant_net is None:
                raise GatewayError("no quantization spec loaded")
            net = self.quant_net
        seed = int(msg.get("avatar_seed", 0))
        return AvatarSession(
            net,
            self.sched,
            AvatarIdentity(seed),
            plan=plan_chunks(**plan_kw),
            expression=float(msg.get("expression", 0.0)),
            sampler=str(msg.get("sampler", "cm")),
            seed=seed,
        )


def _error(code: str, detail: str) -> dict:
    return {"type": "error", "code": code, "detail": detail}


def _check_start(msg: dict) -> str | None:
    """Schema complaints for a start message, or None when it is well formed."""
    if not isinstance(msg.get("avatar_seed", 0), int):
        return "avatar_seed must be an integer"
    plan = msg.get("plan", {})
    if not isinstance(plan, dict) or any(k not in PLAN_FIELDS for k in plan):
        return f"plan overrides must be a subset of {PLAN_FIELDS}"
    if "steps" in msg and not isinstance(msg["steps"], int):
        return "steps must be an integer"
    if not isinstance(msg.get("quantized", False), bool):
        return "quantized must be a boolean"
    return None


def _parse_envelope(payload) -> np.ndarray | None:
    if not isinstance(payload, list) or not all(isinstance(v, (int, float)) for v in payload):
        return None
    env = np.asarray(payload, dtype=np.float32)
    if env.size and not np.all(np.isfinite(env)):
        return None
    return np.clip(env, 0.0, 1.0)


class _WsSession:
    """Per-connection bridge between the websocket and a pipeline thread."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self.sid: str | None = None
        self.session: AvatarSession | None = None
        self.source = LiveSource()
        self.outq: Queue = Queue(maxsize=OUTBOUND_CAPACITY)
        self.thread: threading.Thread | None = None
        self.done = threading.Event()
        self.client_gone = threading.Event()
        self.auto_label = False
        self.auto_last = "idle"
        self.telemetry_log = None

    def _put(self, out: dict) -> None:
        """Blocks while a slow client catches up; discards once it is gone."""
        while not self.client_gone.is_set():
            try:
                self.outq.put(out, timeout=0.1)
                return
            except Full:
                continue

    def _sink(self, msg: dict) -> None:
        kind = msg["type"]
        if kind == "frame":
            pixels = msg["pixels"]
            out = {
                "type": "frame",
                "session": self.sid,
                "index": msg["index"],
                "width": int(pixels.shape[1]),
                "height": int(pixels.shape[0]),
                "pixels": base64.b64encode(pixels.tobytes()).decode("ascii"),
                "ts_emit_ms": msg["t_ms"],
            }
        elif kind == "telemetry":
            out = {"type": "telemetry", "session": self.sid}
            out.update((k, v) for k, v in msg.items() if k != "type")
            # serialize once so the session log and the wire carry identical
            # bytes; clients may export their copy and diff it against ours
            line = json.dumps(out)
            if self.telemetry_log is not None:
                self.telemetry_log.write(line + "\n")
                self.telemetry_log.flush()
            self._put({"type": "_text", "data": line})
            return
        elif kind == "ack":
            label = msg["label"] if msg["kind"] == "state" else self.session.label
            out = {"type": "state_ack", "label": label, "effective_chunk": msg["effective_chunk"]}
        else:
            return
        self._put(out)

    def _run(self, start_at: float) -> None:
        summary = None
        try:
            summary = run_pipeline(
                self.session, self.source, sink=self._sink, mode="threaded", start_at=start_at
            )
        except Exception as exc:                       # surfaced to the client, then close
            self._put(_error("engine_error", str(exc)))
        finally:
            if self.telemetry_log is not None:
                self.telemetry_log.close()
            self.gateway.release(self.sid, summary)
            self._put({"type": "_closed"})
            self.done.set()

    def handle_start(self, msg: dict, t_receipt: float) -> dict | None:
        if self.session is not None:
            return _error("bad_message", "session already started")
        complaint = _check_start(msg)
        if complaint is not None:
            return _error("bad_message", complaint)
        sid = self.gateway.try_acquire()
        if sid is None:
            return _error("busy", f"at capacity ({self.gateway.config.max_sessions} sessions)")
        try:
            session = self.gateway.build_session(msg)
        except (PlanError, SessionError, GatewayError, TypeError, ValueError) as exc:
            self.gateway.release(sid)
            return _error("bad_message", str(exc))
        self.sid = sid
        self.session = session
        self.auto_label = bool(msg.get("auto_label", False))
        self.auto_last = session.label
        if self.gateway.config.telemetry_dir is not None:
            tdir = Path(self.gateway.config.telemetry_dir)
            tdir.mkdir(parents=True, exist_ok=True)
            self.telemetry_log = open(tdir / f"{sid}.telemetry.jsonl", "w")
        self.thread = threading.Thread(target=self._run, args=(t_receipt,), daemon=True)
        self.thread.start()
        return None

    def handle(self, msg: dict) -> dict | None:
        """Returns a reply to send immediately, or None when the engine acks."""
        kind = msg.get("type")
        if kind == "state":
            label = msg.get("label")
            if label not in LABEL_IDS:
                return _error("bad_message", f"unknown label {label!r}")
            self.source.push_event("state", {"label": label})
        elif kind == "expression":
            s = msg.get("s")
            if not isinstance(s, (int, float)) or not -1.0 <= float(s) <= 1.0:
                return _error("bad_message", "expression s must be a number in [-1, 1]")
            self.source.push_event("expression", {"s": float(s)})
        elif kind == "audio":
            env = _parse_envelope(msg.get("envelope"))
            if env is None:
                return _error("bad_message", "envelope must be a list of finite numbers")
            self.source.push_audio(env)
            self._auto_label(env)
        elif kind == "stop":
            self.source.stop()
            return {
                "type": "state_ack",
                "label": self.session.label,
                "effective_chunk": self.session.chunk_index,
            }
        else:
            return _error("bad_message", f"unknown message type {kind!r}")
        return None

    def _auto_label(self, env: np.ndarray) -> None:
        """Optional energy-threshold labeling: loud audio speaks, silence idles."""
        if not self.auto_label or env.size == 0:
            return
        energy = float(env.mean())
        want = None
        if energy > AUTO_SPEAK_ENERGY:
            want = "speaking"
        elif energy < AUTO_IDLE_ENERGY:
            want = "idle"
        if want is not None and want != self.auto_last:
            self.auto_last = want
            self.source.push_event("state", {"label": want})

    def abandon(self) -> None:
        """Synchronous teardown: the pipeline thread notices, drains on its
        own (the sink discards), and releases its slot when done."""
        self.client_gone.set()
        self.source.stop()


def create_app(config: GatewayConfig) -> FastAPI:
    gateway = Gateway(config)

    @asynccontextmanager
    async def lifespan(app):
        yield
        await asyncio.to_thread(gateway.wait_idle)

    app = FastAPI(lifespan=lifespan)
    app.state.gateway = gateway

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/config")
    def config_endpoint():
        resolved = asdict(gateway.config)
        resolved["model"] = {k: gateway.meta[k] for k in ("kind", "num_steps") if k in gateway.meta}
        resolved["quantized_available"] = gateway.quant_net is not None
        return resolved

    @app.get("/metrics")
    def metrics_endpoint():
        return gateway.metrics()

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        bridge = _WsSession(gateway)

        async def pump_in():
            while True:
                raw = await ws.receive_text()
                t_receipt = time.perf_counter()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise ValueError("not an object")
                except ValueError:
                    bridge.outq.put(_error("bad_message", "not a JSON object"))
                    continue
                if msg.get("type") == "start":
                    reply = await asyncio.to_thread(bridge.handle_start, msg, t_receipt)
                elif bridge.session is None:
                    reply = _error("bad_message", "start must precede other messages")
                else:
                    reply = bridge.handle(msg)
                if reply is not None:
                    bridge.outq.put(reply)
                    if reply.get("code") == "busy":
                        # flush the refusal, then let pump_out end the connection
                        bridge.outq.put({"type": "_closed"})

        async def pump_out():
            while True:
                try:
                    msg = await asyncio.to_thread(bridge.outq.get, True, 0.1)
                except Empty:
                    continue
                if msg["type"] == "_closed":
                    return
                data = msg["data"] if msg["type"] == "_text" else json.dumps(msg)
                try:
                    await ws.send_text(data)
                except Exception:  # client went away; the pipeline drains in shutdown
                    return

        # teardown stays await-free: the server cancels this handler right
        # after a disconnect, and an interrupted drain would strand the
        # pipeline thread mid-emit
        tasks = [asyncio.create_task(pump_in()), asyncio.create_task(pump_out())]
        try:
            done, _pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
            disconnected = False
            for t in done:
                exc = t.exception()
                if isinstance(exc, WebSocketDisconnect):
                    disconnected = True
                elif exc is not None:
                    raise exc
            if not disconnected:
                try:
                    await ws.close()
                except Exception:
                    pass
        finally:
            for t in tasks:
                t.cancel()
                t.add_done_callback(lambda t: t.cancelled() or t.exception())
            bridge.abandon()

    return app


def serve(config: GatewayConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
