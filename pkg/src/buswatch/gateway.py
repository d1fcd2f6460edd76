"""HTTP/WebSocket service boundary for consoles and tooling.

The gateway owns a GatewayRuntime: a scenario harness driven on a paced
background thread (simulated milliseconds mapped onto wall clock with a
configurable speedup). Clients observe the system through /v1 endpoints
and steer it through POSTs; live updates stream over one WebSocket with
per-channel cursors, so a reconnecting client resumes exactly where it
left off, without duplicates.

State-changing endpoints are idempotent or answer 409 with the conflicting
state (a second e-stop reports already-in-safe-mode rather than acting
twice).
"""

from __future__ import annotations

import asyncio
import json
import threading
import time
from collections import deque
from pathlib import Path

from fastapi import Body, FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .bench import (
    default_alarm_policy_doc,
    default_detector_docs,
    default_envelope_doc,
    default_grouping_docs,
)
from .errors import (
    AlreadyResolved,
    CycleGuardTripped,
    InvalidScenario,
    NodeUnhealthy,
    NoSnapshot,
    ScenarioNotRunning,
    UnknownAlarm,
)
from .harness import SimulationHarness
from .hierarchy import apply_grouping, build_graph, load_grouping_config
from .simbot import Scenario

STREAM_CHANNELS = ("alarms", "risk", "frames", "graph", "status")
RING_DEPTH = 4096
RISK_PUSH_EVERY_MS = 200


class ChannelRing:
    """Cursor-stamped ring buffer for one stream channel."""

    def __init__(self, depth: int = RING_DEPTH):
        self._events: deque = deque(maxlen=depth)
        self._cursor = 0
        self._lock = threading.Lock()

    def push(self, payload: dict) -> int:
        with self._lock:
            self._cursor += 1
            self._events.append((self._cursor, payload))
            return self._cursor

    def since(self, cursor: int) -> list[tuple[int, dict]]:
        with self._lock:
            return [(c, p) for c, p in self._events if c > cursor]

    @property
    def cursor(self) -> int:
        with self._lock:
            return self._cursor


class GatewayRuntime:
    """A harness plus pacing thread, command lock, and stream fan-out."""

    def __init__(self, scenario: Scenario, detector_docs=None, envelope_doc=None,
                 alarm_policy_doc=None, grouping_docs=None,
                 speedup: float = 1.0, out_dir=None):
        self.scenario = scenario
        self.detector_docs = detector_docs or default_detector_docs()
        self.envelope_doc = envelope_doc or default_envelope_doc()
        self.alarm_policy_doc = alarm_policy_doc or default_alarm_policy_doc()
        self.grouping_docs = grouping_docs or default_grouping_docs()
        self.speedup = speedup
        self.out_dir = out_dir
        self.lock = threading.RLock()
        self.channels = {name: ChannelRing() for name in STREAM_CHANNELS}
        self._thread: threading.Thread | None = None
        self._stop_requested = threading.Event()
        self.running = False
        self.now_ms = 0
        self._last_risk_push = -RISK_PUSH_EVERY_MS
        self._build()

    def _build(self) -> None:
        self.harness = SimulationHarness(
            self.scenario, self.detector_docs, self.envelope_doc,
            self.alarm_policy_doc, self.grouping_docs, out_dir=self.out_dir)
        self.harness.bus.add_directory_watcher(lambda ev: self._push_graph())
        self._push_graph()
        self._push_status()

    # -- stream pushes ----------------------------------------------------------

    def _push(self, channel: str, payload: dict) -> None:
        self.channels[channel].push(payload)

    def _push_graph(self) -> None:
        self._push("graph", self.graph_payload())

    def _push_status(self) -> None:
        self._push("status", self.status_payload())

    def _push_alarm(self, alarm) -> None:
        self._push("alarms", alarm.to_json())

    # -- scenario control -----------------------------------------------------------

    def start_scenario(self) -> dict:
        with self.lock:
            if self.running:
                raise InvalidScenario("scenario already running")
            if self.harness.runner.now_ms > 0:
                # previous run consumed the harness; build a fresh one
                self._build()
            self.running = True
            self._stop_requested.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        self._push_status()
        return {"status": "started"}

    def stop_scenario(self) -> dict:
        if not self.running:
            raise ScenarioNotRunning("no scenario running")
        self._stop_requested.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self._push_status()
        return {"status": "stopped", "t_ms": self.now_ms}

    def run_sync(self) -> None:
        """Run the whole scenario inline (tests and batch use)."""
        with self.lock:
            if self.running:
                raise InvalidScenario("scenario already running")
            if self.harness.runner.now_ms > 0:
                self._build()
            self.running = True
            self._stop_requested.clear()
        self._loop()

    def _loop(self) -> None:
        runner = self.harness.runner
        scenario = self.scenario
        tick_s = scenario.tick_ms / 1000.0 / max(self.speedup, 1e-6)
        n_ticks = scenario.duration_ms // scenario.tick_ms
        runner.running = True
        try:
            for i in range(n_ticks):
                if self._stop_requested.is_set():
                    break
                start = time.perf_counter()
                t_ms = i * scenario.tick_ms
                with self.lock:
                    self.now_ms = t_ms
                    runner.tick(t_ms)
                    result = self.harness.pipeline.step(t_ms)
                    self._publish_step(result, t_ms)
                elapsed = time.perf_counter() - start
                if tick_s > elapsed:
                    time.sleep(tick_s - elapsed)
            with self.lock:
                self.harness.pipeline.finish(self.now_ms + scenario.tick_ms)
        finally:
            runner.running = False
            self.running = False
            self._push_status()

    def _publish_step(self, result, t_ms: int) -> None:
        for alarm in result.presented:
            self._push_alarm(alarm)
        for frame in result.frames:
            self._push("frames", frame.to_json())
        if result.estop is not None:
            self._push_status()
        if t_ms - self._last_risk_push >= RISK_PUSH_EVERY_MS:
            self._last_risk_push = t_ms
            self._push("risk", self.risk_payload())

    # -- payloads ----------------------------------------------------------------------

    def status_payload(self) -> dict:
        return {
            "status": "ok",
            "mode": self.harness.safe_mode.mode,
            "scenario_running": self.running,
            "t_ms": self.now_ms,
        }

    def risk_payload(self) -> dict:
        return {"t_ms": self.now_ms} | self.harness.pipeline.risk_status()

    def graph_payload(self) -> dict:
        graph = build_graph(self.harness.bus.directory)
        grouping = apply_grouping(graph,
                                  load_grouping_config(self.grouping_docs))
        return {"graph": graph.to_json(), "grouping": grouping.to_json(),
                "directory": self.harness.bus.directory.snapshot(),
                "epoch": self.harness.bus.directory.epoch}

    def metrics_payload(self) -> dict:
        bus_metrics = self.harness.bus.metrics()
        capture = self.harness._capture.stats() if self.harness._capture else None
        desk = self.harness.desk
        return {
            "t_ms": self.now_ms,
            "bus": bus_metrics,
            "capture": (
                {"records_written": capture.records_written,
                 "capture_drops": capture.capture_drops,
                 "topics_seen": capture.topics_seen} if capture else None),
            "invalid_counts": self.harness.pipeline.invalid_counts(),
            "alarm_counts": {
                state: len(desk.list_alarms(state))
                for state in ("raised", "presented", "dismissed", "confirmed",
                              "suppressed", "escalated")},
            "frames_processed": self.harness.pipeline.frames_processed,
        }

    # -- commands ------------------------------------------------------------------------

    def feedback(self, alarm_id: str, action: str) -> dict:
        with self.lock:
            alarm = self.harness.desk.feedback(alarm_id, action, t_ms=self.now_ms)
            self._push_alarm(alarm)
            payload = alarm.to_json()
            payload["suppressed_signatures"] = (
                self.harness.desk.suppressed_signatures(self.now_ms))
            return payload

    def estop(self) -> dict:
        with self.lock:
            if self.harness.safe_mode.mode == "safe":
                raise AlreadyResolved("already-in-safe-mode")
            self.harness.desk.raise_escalation("operator-estop",
                                               {"t_ms": self.now_ms}, self.now_ms)
            report = self.harness.safe_mode.enter(self.now_ms, reason="operator-estop")
            self._push_status()
            self._push("alarms", self.harness.desk.list_alarms()[-1].to_json())
            return {"mode": report.mode, "t_ms": self.now_ms}

    def set_safe_mode(self, action: str) -> dict:
        with self.lock:
            if action == "enter":
                if self.harness.safe_mode.mode == "safe":
                    raise AlreadyResolved("already-in-safe-mode")
                report = self.harness.safe_mode.enter(self.now_ms, reason="operator")
            elif action == "exit":
                if self.harness.safe_mode.mode == "full":
                    raise AlreadyResolved("already-in-full-mode")
                report = self.harness.safe_mode.exit(self.now_ms)
            else:
                raise InvalidScenario(f"unknown safe_mode action {action!r}")
            self._push_status()
            return {"mode": report.mode, "t_ms": self.now_ms}

    def inject(self, kind: str, magnitude, duration_ms: int) -> dict:
        with self.lock:
            inj_id = self.harness.runner.inject_live(kind, magnitude, duration_ms)
            return {"injection_id": inj_id, "t_ms": self.now_ms}

    def snapshot(self, node: str) -> dict:
        with self.lock:
            snap = self.harness.manager.take_snapshot(node, self.now_ms)
            return {"node": node, "t_ms": snap.t_ms,
                    "healthy_window_ms": snap.healthy_window_ms}

    def restore(self, node: str, fault_signature: str) -> dict:
        with self.lock:
            report = self.harness.manager.restore(node, fault_signature, self.now_ms)
            return {"node": node, "snapshot_t_ms": report.snapshot_t_ms,
                    "attempts_in_window": report.attempts_in_window}

    def alarms_payload(self, state: str | None = None) -> list[dict]:
        with self.lock:
            return [a.to_json() for a in self.harness.desk.list_alarms(state)]

    def frames_payload(self, topic: str | None = None, limit: int = 50) -> list[dict]:
        with self.lock:
            frames = self.harness.pipeline.frame_log[-limit:]
            out = []
            for f in frames:
                doc = f.to_json()
                if topic is not None:
                    doc["per_topic_rate"] = {
                        k: v for k, v in doc["per_topic_rate"].items() if k == topic}
                out.append(doc)
            return out


def create_app(runtime: GatewayRuntime, console_dist=None) -> FastAPI:
    app = FastAPI(title="buswatch gateway", version="1.0")

    def conflict(message: str) -> JSONResponse:
        return JSONResponse(status_code=409, content={"error": message})

    def missing(message: str) -> JSONResponse:
        return JSONResponse(status_code=404, content={"error": message})

    @app.get("/v1/health")
    def health():
        return runtime.status_payload()

    @app.get("/v1/metrics")
    def metrics():
        return runtime.metrics_payload()

    @app.get("/v1/graph")
    def graph():
        return runtime.graph_payload()

    @app.get("/v1/risk")
    def risk():
        return runtime.risk_payload()

    @app.get("/v1/alarms")
    def alarms(state: str | None = None):
        return runtime.alarms_payload(state)

    @app.get("/v1/frames")
    def frames(topic: str | None = None, limit: int = 50):
        return runtime.frames_payload(topic, limit)

    @app.post("/v1/alarms/{alarm_id}/feedback")
    def feedback(alarm_id: str, body: dict = Body(...)):
        try:
            return runtime.feedback(alarm_id, body.get("action", ""))
        except UnknownAlarm as exc:
            return missing(f"unknown alarm {exc}")
        except (AlreadyResolved, ValueError) as exc:
            return conflict(str(exc))

    @app.post("/v1/estop")
    def estop():
        try:
            return runtime.estop()
        except AlreadyResolved as exc:
            return conflict(str(exc))

    @app.post("/v1/safe_mode")
    def safe_mode(body: dict = Body(...)):
        try:
            return runtime.set_safe_mode(body.get("action", ""))
        except AlreadyResolved as exc:
            return conflict(str(exc))
        except InvalidScenario as exc:
            return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.post("/v1/inject")
    def inject(body: dict = Body(...)):
        try:
            return runtime.inject(body.get("kind", ""), body.get("magnitude"),
                                  int(body.get("duration_ms", 0)))
        except ScenarioNotRunning as exc:
            return conflict(str(exc))
        except InvalidScenario as exc:
            return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.post("/v1/snapshot/{node:path}")
    def snapshot(node: str):
        try:
            return runtime.snapshot(node)
        except NoSnapshot as exc:
            return missing(str(exc))
        except NodeUnhealthy as exc:
            return conflict(str(exc))

    @app.post("/v1/restore/{node:path}")
    def restore(node: str, body: dict = Body(default={})):
        try:
            return runtime.restore(node, body.get("fault_signature", "manual"))
        except NoSnapshot as exc:
            return missing(str(exc))
        except CycleGuardTripped as exc:
            return conflict(str(exc))

    @app.post("/v1/scenario/start")
    def scenario_start():
        try:
            return runtime.start_scenario()
        except InvalidScenario as exc:
            return conflict(str(exc))

    @app.post("/v1/scenario/stop")
    def scenario_stop():
        try:
            return runtime.stop_scenario()
        except ScenarioNotRunning as exc:
            return conflict(str(exc))

    @app.websocket("/v1/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        subscriptions: dict[str, int] = {}
        try:
            while True:
                try:
                    text = await asyncio.wait_for(ws.receive_text(), timeout=0.05)
                    msg = json.loads(text)
                    cursors = msg.get("cursor", {})
                    for channel in msg.get("subscribe", []):
                        if channel in STREAM_CHANNELS:
                            subscriptions[channel] = int(cursors.get(channel, 0))
                    for channel in msg.get("unsubscribe", []):
                        subscriptions.pop(channel, None)
                except asyncio.TimeoutError:
                    pass
                for channel, cursor in list(subscriptions.items()):
                    for c, payload in runtime.channels[channel].since(cursor):
                        await ws.send_text(json.dumps(
                            {"channel": channel, "cursor": c, "event": payload}))
                        subscriptions[channel] = c
        except WebSocketDisconnect:
            return

    dist = console_dist or Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if Path(dist).is_dir():
        app.mount("/", StaticFiles(directory=str(dist), html=True), name="console")
    return app
