"""Whole-system assembly: scenario, capture, detection stack, recovery.

A SimulationHarness owns one run end to end: it builds the bus, registers
the scenario topics, starts capture, wires the pipeline into the tick loop
and persists the run artifacts (trace.jsonl, labels.jsonl, alarms.jsonl,
frames.jsonl, topics.json, meta.json) under the run directory.

An emergency stop flows into safe mode in the same tick it fires: the
pipeline's stop callback drives the safe-mode controller, which pauses
detectors, clamps the robot's commanded speed to normal bounds, and leaves
capture and the envelope monitor running.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .alarmdesk import AlarmDesk, AlarmPolicy
from .capture import save_topic_snapshot, start_capture
from .detectors import AssumptionSet, build_detector, load_detector_configs
from .envelope import load_envelope_config
from .features import CalendarMap
from .hierarchy import apply_grouping, build_graph, load_grouping_config
from .msgbus import RANGE_FLAG, Bus
from .pipeline import EnvelopeWiring, Pipeline
from .recovery import RecoveryManager, SafeModeController, SnapshotStore
from .simbot import Scenario, ScenarioRunner

RUN_FILES = {
    "trace": "trace.jsonl",
    "labels": "labels.jsonl",
    "alarms": "alarms.jsonl",
    "frames": "frames.jsonl",
    "topics": "topics.json",
    "meta": "meta.json",
    "eval": "eval.json",
}


@dataclass
class HarnessReport:
    scenario_report: object
    capture_stats: object
    presented_alarms: int
    anomaly_events: int
    estop_fired: bool
    safe_mode_entered: bool
    out_dir: Path | None


class SimulationHarness:
    def __init__(self, scenario: Scenario, detector_docs, envelope_doc=None,
                 alarm_policy_doc=None, grouping_docs=None,
                 validity_filter: bool = True, out_dir=None,
                 window_ms: int = 1000, lag_ms: int = 100,
                 calendar_epoch: str = "2024-01-01T00:00:00",
                 snapshot_dir=None):
        self.scenario = scenario
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.bus = Bus()
        self.runner = ScenarioRunner(scenario, self.bus)
        # range experiments downstream of the bus need delivery, not rejection
        self.bus.set_range_mode("/scan_summary", RANGE_FLAG)

        desk = AlarmDesk(AlarmPolicy.from_dict(alarm_policy_doc or {}))

        envelope_wiring = None
        self._safe_speed = None
        if envelope_doc is not None:
            env, model, sources = load_envelope_config(envelope_doc)
            envelope_wiring = EnvelopeWiring(envelope=env, model=model,
                                             sources=sources)
            for dim in env.dims:
                if dim.name == "speed":
                    self._safe_speed = dim.n_hi

        grouping = None
        if grouping_docs:
            graph = build_graph(self.bus.directory)
            grouping = apply_grouping(graph, load_grouping_config(grouping_docs))

        assumptions = AssumptionSet()
        assumptions.register("teleop-active",
                             lambda v: v.frame.rate("/cmd_vel") > 0)

        detectors = [build_detector(c) for c in load_detector_configs(detector_docs)]
        self.pipeline = Pipeline(
            self.bus, detectors, desk=desk, window_ms=window_ms, lag_ms=lag_ms,
            calendar=CalendarMap(calendar_epoch), envelope_wiring=envelope_wiring,
            assumptions=assumptions, grouping=grouping,
            validity_filter=validity_filter)

        store = SnapshotStore(snapshot_dir or (self.out_dir / "snap"
                                               if self.out_dir else None))
        self.manager = RecoveryManager(store=store, desk=desk)
        for det_id, det in self.pipeline.detectors.items():
            self.manager.register(f"det:{det_id}", det)
        self.manager.register("features", self.pipeline.features)
        self.manager.register("simbot", self.runner)
        if self.pipeline.accumulator is not None:
            self.manager.register("envelope", self.pipeline.accumulator)
        self.pipeline.on_event = self.manager.on_anomaly_event

        self.safe_mode = SafeModeController(
            pipeline=self.pipeline, runner=self.runner,
            safe_speed=self._safe_speed, manager=self.manager)
        self.pipeline.on_estop = lambda decision: self.safe_mode.enter(
            decision.t_ms, reason="estop")

        self._capture = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._capture = start_capture(self.bus,
                                          self.out_dir / RUN_FILES["trace"])

    @property
    def desk(self) -> AlarmDesk:
        return self.pipeline.desk

    def run(self) -> HarnessReport:
        estop_seen = []

        def tick_hook(t_ms):
            result = self.pipeline.step(t_ms)
            if result.estop is not None:
                estop_seen.append(result.estop)

        scenario_report = self.runner.run(tick_hook=tick_hook)
        self.pipeline.finish(self.scenario.duration_ms)

        stats = None
        if self._capture is not None:
            stats = self._capture.stop()
        if self.out_dir is not None:
            self._write_artifacts(scenario_report)

        return HarnessReport(
            scenario_report=scenario_report,
            capture_stats=stats,
            presented_alarms=len([a for a in self.desk.list_alarms()
                                  if any(t["state"] == "presented"
                                         for t in a.transitions)]),
            anomaly_events=len(self.pipeline.event_log),
            estop_fired=bool(estop_seen),
            safe_mode_entered=self.safe_mode.mode == "safe",
            out_dir=self.out_dir,
        )

    def _write_artifacts(self, scenario_report) -> None:
        out = self.out_dir
        with (out / RUN_FILES["labels"]).open("w", encoding="utf-8") as fh:
            for label in scenario_report.labels:
                fh.write(json.dumps(label.to_json(), separators=(",", ":")))
                fh.write("\n")
        self.desk.write_log(out / RUN_FILES["alarms"])
        with (out / RUN_FILES["frames"]).open("w", encoding="utf-8") as fh:
            for frame in self.pipeline.frame_log:
                fh.write(frame.canonical())
                fh.write("\n")
        save_topic_snapshot(out / RUN_FILES["topics"], self.bus)
        meta = {
            "window_ms": self.pipeline.window_ms,
            "duration_ms": self.scenario.duration_ms,
            "tick_ms": self.scenario.tick_ms,
            "seed": self.scenario.seed,
            "validity_filter": self.pipeline.validity_filter,
            "invalid_counts": self.pipeline.invalid_counts(),
            "messages_published": scenario_report.messages_published,
        }
        (out / RUN_FILES["meta"]).write_text(
            json.dumps(meta, indent=2, ensure_ascii=False), encoding="utf-8")
