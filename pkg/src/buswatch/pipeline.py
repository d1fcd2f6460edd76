"""Detection pipeline: wiring from bus messages to presented alarms.

One Pipeline instance consumes an ordered message stream (its own wildcard
subscription), applies the validity filter, folds valid messages into the
feature state plus per-window payload-value aggregates, and hands each
closed window to the detectors and the assumption monitor. Anomaly events,
assumption changes and envelope stop decisions all land in the alarm desk.

The envelope monitor runs on the tick cadence, not the window cadence, so
an emergency stop fires within one tick of the offending state. Validity
never crosses into anomaly: out-of-range messages (whether the bus rejected
them or delivered them flagged) are counted on the validity channel and
withheld from every detector input.

Auxiliary per-window values exposed to detectors:

* ``value:<topic>:<field>``     mean of the field over the window
* ``absvalue:<topic>:<field>``  mean of the field's absolute value
* ``group:<name>:cpu``          composed cpu load over a node group
* ``invalid:<topic>``           count of invalid publishes in the window
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .alarmdesk import Alarm, AlarmDesk
from .detectors import (
    AnomalyEvent,
    AssumptionChange,
    AssumptionSet,
    Detector,
    FrameView,
    filter_validity,
)
from .envelope import Envelope, EStopDecision, RiskAccumulator, RiskModel
from .features import FeatureFrame, FeatureState
from .hierarchy import GroupingScheme, compose
from .msgbus import Bus, Message

PIPELINE_QUEUE_DEPTH = 65536


@dataclass
class StepResult:
    frames: list = field(default_factory=list)
    events: list = field(default_factory=list)
    assumption_changes: list = field(default_factory=list)
    presented: list = field(default_factory=list)
    estop: EStopDecision | None = None


@dataclass
class EnvelopeWiring:
    envelope: Envelope
    model: RiskModel
    sources: dict  # dim name -> {topic, field, abs}


class Pipeline:
    """Single-consumer detection stack over one bus."""

    def __init__(self, bus: Bus, detectors: list[Detector],
                 desk: AlarmDesk | None = None,
                 window_ms: int = 1000, lag_ms: int = 100, calendar=None,
                 envelope_wiring: EnvelopeWiring | None = None,
                 assumptions: AssumptionSet | None = None,
                 grouping: GroupingScheme | None = None,
                 validity_filter: bool = True):
        self.bus = bus
        self.detectors = {d.id: d for d in detectors}
        self.desk = desk or AlarmDesk()
        self.assumptions = assumptions or AssumptionSet()
        self.grouping = grouping
        self.validity_filter = validity_filter

        self.features = FeatureState(window_ms=window_ms, lag_ms=lag_ms,
                                     calendar=calendar)
        self.window_ms = window_ms
        self._sub = bus.subscribe("pipeline", "*", depth=PIPELINE_QUEUE_DEPTH)
        self._validity_events = []
        bus.add_validity_watcher(self._validity_events.append)

        self._value_sums: dict[tuple, list] = {}
        self._window_invalid: dict[str, int] = {}
        self.validity_totals: dict[str, int] = {}
        self.latest_values: dict[tuple, float] = {}
        self._schema_cache: dict = {}

        self.envelope_wiring = envelope_wiring
        self.accumulator = None
        if envelope_wiring is not None:
            self.accumulator = RiskAccumulator(envelope_wiring.envelope,
                                               envelope_wiring.model)

        self.safe_mode = False
        self.on_estop = None  # callback(EStopDecision)
        self.on_event = None  # callback(AnomalyEvent), e.g. health tracking

        self.event_log: list[AnomalyEvent] = []
        self.frame_log: list[FeatureFrame] = []
        self.frames_processed = 0
        self._last_step_ms: int | None = None

    # -- message handling ------------------------------------------------------

    def _schema(self, topic: str):
        sc = self._schema_cache.get(topic)
        if sc is None:
            sc = self.bus.get_schema(topic)
            self._schema_cache[topic] = sc
        return sc

    def _count_invalid(self, topic: str) -> None:
        self._window_invalid[topic] = self._window_invalid.get(topic, 0) + 1
        self.validity_totals[topic] = self.validity_totals.get(topic, 0) + 1

    def _ingest_message(self, msg: Message) -> list[tuple]:
        """Returns [(frame, aux), ...] for windows the message closed."""
        if self.validity_filter:
            res = filter_validity(msg, self._schema(msg.topic))
            if not res.valid:
                # flagged-and-delivered invalid data: excluded and counted
                # (bus-rejected publishes are counted via validity events)
                return []
        closed = self.features.ingest(msg.topic, msg.t_ms)
        out = self._pair_aux(closed)
        for name, value in msg.payload.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                continue
            key = (msg.topic, name)
            self.latest_values[key] = float(value)
            sums = self._value_sums.setdefault(key, [0.0, 0.0, 0])
            sums[0] += float(value)
            sums[1] += abs(float(value))
            sums[2] += 1
        return out

    def _pair_aux(self, closed_frames: list) -> list[tuple]:
        """First closed frame gets the accumulated aux; gap windows are empty."""
        out = []
        for i, frame in enumerate(closed_frames):
            aux = self._roll_aux() if i == 0 else {}
            out.append((frame, aux))
        return out

    def _roll_aux(self) -> dict:
        aux = {}
        for (topic, fname), (total, abstotal, n) in self._value_sums.items():
            if n:
                aux[f"value:{topic}:{fname}"] = total / n
                aux[f"absvalue:{topic}:{fname}"] = abstotal / n
        for topic, n in self._window_invalid.items():
            aux[f"invalid:{topic}"] = n
        if self.grouping is not None:
            for gname, members in self.grouping.groups.items():
                loads = [aux.get(f"value:/sys/cpu/{m}:load") for m in members]
                present = [v for v in loads if v is not None]
                if present and len(present) == len(members):
                    aux[f"group:{gname}:cpu"] = compose([1.0] * len(present), present)
        self._value_sums.clear()
        self._window_invalid.clear()
        return aux

    # -- stepping -----------------------------------------------------------------

    def step(self, now_ms: int) -> StepResult:
        """Process everything the bus delivered up to now_ms."""
        result = StepResult()

        for ev in self._validity_events:
            self._count_invalid(ev.topic)
        self._validity_events.clear()

        pairs = []
        while True:
            msg = self._sub.pop_nowait()
            if msg is None:
                break
            pairs.extend(self._ingest_message(msg))
        pairs.extend(self._pair_aux(self.features.advance_to(now_ms)))

        for frame, aux in pairs:
            self._process_window(frame, aux, result)

        self._update_envelope(now_ms, result)
        return result

    def finish(self, end_ms: int) -> StepResult:
        """Flush windows that end at end_ms (call once after the last tick)."""
        return self.step(end_ms)

    def _process_window(self, frame: FeatureFrame, aux: dict,
                        result: StepResult) -> None:
        self.frames_processed += 1
        self.frame_log.append(frame)
        result.frames.append(frame)
        if self.safe_mode:
            return  # only the envelope path stays live in safe mode
        view = FrameView(frame, aux)
        for det in self.detectors.values():
            event = det.process(view)
            if event is None:
                continue
            self.event_log.append(event)
            result.events.append(event)
            if self.on_event is not None:
                self.on_event(event)
            alarm = self.desk.ingest_event(event)
            if alarm is not None:
                result.presented.append(alarm)
        for change in self.assumptions.check(view):
            result.assumption_changes.append(change)
            alarm = self.desk.ingest_event(change)
            if alarm is not None:
                result.presented.append(alarm)

    def _update_envelope(self, now_ms: int, result: StepResult) -> None:
        if self.accumulator is None:
            return
        dt = None if self._last_step_ms is None else now_ms - self._last_step_ms
        self._last_step_ms = now_ms
        if dt is None or dt <= 0:
            return
        wiring = self.envelope_wiring
        phi = []
        for dim in wiring.envelope.dims:
            src = wiring.sources.get(dim.name)
            if src is None:
                phi.append((dim.n_lo + dim.n_hi) / 2.0)
                continue
            value = self.latest_values.get((src["topic"], src["field"]))
            if value is None:
                value = (dim.n_lo + dim.n_hi) / 2.0
            elif src.get("abs"):
                value = abs(value)
            phi.append(value)
        decision = self.accumulator.update(phi, dt_ms=dt, t_ms=now_ms)
        if decision is not None:
            result.estop = decision
            alarm = self.desk.ingest_event(decision)
            if alarm is not None:
                result.presented.append(alarm)
            if self.on_estop is not None:
                self.on_estop(decision)

    # -- control -----------------------------------------------------------------

    def pause_detectors(self) -> None:
        self.safe_mode = True

    def resume_detectors(self) -> None:
        self.safe_mode = False

    def risk_status(self) -> dict:
        if self.accumulator is None:
            return {"enabled": False}
        return {"enabled": True} | self.accumulator.status()

    def invalid_counts(self) -> dict:
        return dict(sorted(self.validity_totals.items()))
