"""Alarm lifecycle, rate thresholding, and learned false-alarm suppression.

Every detector event maps to an alarm signature (detector, target, kind).
A raise only reaches the operator once its signature has raised at least h
times inside the rolling alarm window (h may adapt to the trailing raise
rate). Surviving raises are then checked against the suppression model: a
Beta(1,1) posterior over the operator's dismiss preference per signature.
Once a signature has been dismissed often enough (posterior mean above the
cutoff, minimum evidence met, and no standing confirm), further raises are
suppressed - logged with the suppressing rule, never presented.

A single confirm un-suppresses a signature immediately and resets its
dismissal count: recurring true alarms must not stay muted. Counts decay
with a one-hour half-life (simulated time) so stale preferences expire.
Critical alarms (emergency stops, recovery escalations) bypass both the
rate threshold and the model unconditionally.

Every raise is kept in the log with its final state; nothing is dropped
silently.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .detectors import AnomalyEvent, AssumptionChange
from .envelope import EStopDecision
from .errors import AlreadyResolved, UnknownAlarm

SEVERITIES = ("info", "warning", "critical")
ALARM_STATES = ("raised", "presented", "dismissed", "confirmed", "suppressed",
                "escalated")
ANOMALY_KINDS = ("extreme", "isolated", "abnormal")

DEFAULT_HALF_LIFE_MS = 3_600_000  # one simulated hour
BETA_ZERO_EPS = 0.5  # decayed counts below this behave as zero


@dataclass(frozen=True)
class AlarmSignature:
    detector_id: str
    target: str
    kind: str

    def key(self) -> str:
        return f"{self.detector_id}|{self.target}|{self.kind}"

    def to_json(self) -> dict:
        return {"detector_id": self.detector_id, "target": self.target,
                "kind": self.kind}


@dataclass
class Alarm:
    id: str
    t_ms: int
    signature: AlarmSignature
    severity: str
    state: str
    score: float = 0.0
    reason: str | None = None
    source: dict = field(default_factory=dict)
    transitions: list = field(default_factory=list)

    def transition(self, state: str, t_ms: int, reason: str | None = None) -> None:
        self.state = state
        self.transitions.append({"state": state, "t_ms": t_ms, "reason": reason})

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "t_ms": self.t_ms,
            "signature": self.signature.to_json(),
            "severity": self.severity,
            "state": self.state,
            "score": self.score,
            "reason": self.reason,
            "source": self.source,
            "transitions": self.transitions,
        }


@dataclass
class AlarmPolicy:
    window_ms: int = 10_000       # W: rolling raise window per signature
    persist_threshold: int = 1    # h: raises within W before presenting
    dynamic_threshold: bool = False
    dynamic_c: float = 0.5
    h_min: int = 1
    h_max: int = 10
    suppression_cutoff: float = 0.8   # q
    min_evidence: int = 4             # n_min
    half_life_ms: int = DEFAULT_HALF_LIFE_MS

    @classmethod
    def from_dict(cls, doc: dict) -> "AlarmPolicy":
        return cls(
            window_ms=int(doc.get("window_ms", 10_000)),
            persist_threshold=int(doc.get("persist_threshold", 1)),
            dynamic_threshold=bool(doc.get("dynamic_threshold", False)),
            dynamic_c=float(doc.get("dynamic_c", 0.5)),
            h_min=int(doc.get("h_min", 1)),
            h_max=int(doc.get("h_max", 10)),
            suppression_cutoff=float(doc.get("suppression_cutoff", 0.8)),
            min_evidence=int(doc.get("min_evidence", 4)),
            half_life_ms=int(doc.get("half_life_ms", DEFAULT_HALF_LIFE_MS)),
        )


class SuppressionModel:
    """Per-signature dismiss/confirm counts over a Beta(1,1) prior."""

    def __init__(self, cutoff: float = 0.8, min_evidence: int = 4,
                 half_life_ms: int = DEFAULT_HALF_LIFE_MS):
        self.cutoff = cutoff
        self.min_evidence = min_evidence
        self.half_life_ms = half_life_ms
        self._entries: dict[str, dict] = {}

    def _entry(self, sig: AlarmSignature) -> dict:
        return self._entries.setdefault(
            sig.key(), {"alpha": 0.0, "beta": 0.0, "last_ms": 0})

    def _decay(self, entry: dict, t_ms: int) -> None:
        dt = max(0, t_ms - entry["last_ms"])
        if dt and self.half_life_ms > 0:
            factor = 0.5 ** (dt / self.half_life_ms)
            entry["alpha"] *= factor
            entry["beta"] *= factor
        entry["last_ms"] = t_ms

    def record_dismiss(self, sig: AlarmSignature, t_ms: int) -> None:
        e = self._entry(sig)
        self._decay(e, t_ms)
        e["alpha"] += 1.0

    def record_confirm(self, sig: AlarmSignature, t_ms: int) -> None:
        # one confirm clears the dismissal history: true alarms stay audible
        e = self._entry(sig)
        self._decay(e, t_ms)
        e["alpha"] = 0.0
        e["beta"] += 1.0

    def posterior_mean(self, sig: AlarmSignature, t_ms: int) -> float:
        e = self._entry(sig)
        self._decay(e, t_ms)
        return (1.0 + e["alpha"]) / (2.0 + e["alpha"] + e["beta"])

    def suppresses(self, sig: AlarmSignature, t_ms: int) -> bool:
        e = self._entry(sig)
        self._decay(e, t_ms)
        if e["beta"] >= BETA_ZERO_EPS:
            return False
        # counts decay continuously, so the integer evidence gate gets the
        # same half-count tolerance as the beta-zero test
        if e["alpha"] + e["beta"] < self.min_evidence - BETA_ZERO_EPS:
            return False
        mean = (1.0 + e["alpha"]) / (2.0 + e["alpha"] + e["beta"])
        return mean > self.cutoff

    def snapshot(self) -> dict:
        return {k: dict(v) for k, v in sorted(self._entries.items())}


class AlarmDesk:
    """Serialized alarm state machine fed by detector events and feedback."""

    def __init__(self, policy: AlarmPolicy | None = None):
        self.policy = policy or AlarmPolicy()
        self.model = SuppressionModel(
            cutoff=self.policy.suppression_cutoff,
            min_evidence=self.policy.min_evidence,
            half_life_ms=self.policy.half_life_ms,
        )
        self.alarms: dict[str, Alarm] = {}
        self.order: list[str] = []
        self._ids = itertools.count(1)
        self._raises: dict[str, deque] = {}
        self._listeners: list = []
        self.threshold_log: list[dict] = []
        self._dynamic_h: dict[str, int] = {}

    def add_listener(self, fn) -> None:
        """fn(Alarm) on every presented or escalated alarm."""
        self._listeners.append(fn)

    # -- ingestion ------------------------------------------------------------

    def ingest_event(self, event) -> Alarm | None:
        """Route one detector-side event through thresholding and suppression.

        Returns the alarm when it was presented (or escalated), None when it
        was held back; held-back raises are still logged.
        """
        if isinstance(event, AnomalyEvent):
            sig = AlarmSignature(event.detector_id, str(event.target), event.kind)
            return self._ingest(sig, event.t_ms, "warning", event.score,
                                event.to_json())
        if isinstance(event, AssumptionChange):
            sig = AlarmSignature("assumptions", event.name, "assumption_change")
            return self._ingest(sig, event.t_ms, "info", 0.0, event.to_json(),
                                skip_rate_threshold=True)
        if isinstance(event, EStopDecision):
            sig = AlarmSignature("envelope", "estop", "estop")
            return self._ingest(sig, event.t_ms, "critical", 0.0, event.to_json())
        raise TypeError(f"cannot ingest {type(event).__name__}")

    def raise_escalation(self, source: str, detail: dict, t_ms: int) -> Alarm:
        """Critical escalation (e.g. a tripped recovery cycle guard)."""
        sig = AlarmSignature("recovery", source, "escalation")
        alarm = self._new_alarm(sig, t_ms, "critical", 0.0, detail)
        alarm.transition("presented", t_ms)
        alarm.transition("escalated", t_ms, reason=source)
        self._notify(alarm)
        return alarm

    def _new_alarm(self, sig, t_ms, severity, score, source) -> Alarm:
        alarm = Alarm(
            id=f"a-{next(self._ids):06d}", t_ms=t_ms, signature=sig,
            severity=severity, state="raised", score=score, source=source)
        alarm.transitions.append({"state": "raised", "t_ms": t_ms, "reason": None})
        self.alarms[alarm.id] = alarm
        self.order.append(alarm.id)
        return alarm

    def _ingest(self, sig, t_ms, severity, score, source,
                skip_rate_threshold=False) -> Alarm | None:
        alarm = self._new_alarm(sig, t_ms, severity, score, source)

        if severity == "critical":
            alarm.transition("presented", t_ms, reason="critical_bypass")
            self._notify(alarm)
            return alarm

        if not skip_rate_threshold:
            h = self._current_threshold(sig, t_ms)
            raises = self._raises.setdefault(sig.key(), deque())
            raises.append(t_ms)
            while raises and raises[0] <= t_ms - self.policy.window_ms:
                raises.popleft()
            if len(raises) < h:
                alarm.reason = "below_rate_threshold"
                alarm.transition("raised", t_ms, reason="below_rate_threshold")
                return None

        if self.model.suppresses(sig, t_ms):
            alarm.reason = "learned_suppression"
            alarm.transition("suppressed", t_ms, reason="learned_suppression")
            return None

        alarm.transition("presented", t_ms)
        self._notify(alarm)
        return alarm

    def _notify(self, alarm: Alarm) -> None:
        for fn in self._listeners:
            fn(alarm)

    # -- dynamic threshold -------------------------------------------------------

    def _current_threshold(self, sig: AlarmSignature, t_ms: int) -> int:
        if not self.policy.dynamic_threshold:
            return max(1, self.policy.persist_threshold)
        raises = self._raises.get(sig.key(), deque())
        trailing = sum(1 for r in raises if r > t_ms - self.policy.window_ms)
        h = self.adapt_threshold(sig, trailing)
        return h

    def adapt_threshold(self, sig: AlarmSignature, trailing_raises: int) -> int:
        """h = clamp(round(c * trailing raises per window), h_min, h_max)."""
        raw = int(self.policy.dynamic_c * trailing_raises + 0.5)
        h = max(self.policy.h_min, min(self.policy.h_max, raw))
        prev = self._dynamic_h.get(sig.key())
        if prev != h:
            self._dynamic_h[sig.key()] = h
            self.threshold_log.append(
                {"signature": sig.key(), "h": h, "trailing": trailing_raises})
        return h

    # -- operator feedback ---------------------------------------------------------

    def feedback(self, alarm_id: str, action: str, t_ms: int | None = None) -> Alarm:
        if action not in ("dismiss", "confirm"):
            raise ValueError(f"action must be dismiss or confirm, got {action!r}")
        alarm = self.alarms.get(alarm_id)
        if alarm is None:
            raise UnknownAlarm(alarm_id)
        if alarm.state in ("dismissed", "confirmed"):
            raise AlreadyResolved(f"{alarm_id} already {alarm.state}")
        # suppressed alarms stay actionable: confirming one is the lever that
        # un-mutes a signature the model got wrong
        if alarm.state not in ("presented", "escalated", "suppressed"):
            raise AlreadyResolved(f"{alarm_id} in state {alarm.state}")
        t = alarm.t_ms if t_ms is None else t_ms
        if action == "dismiss":
            self.model.record_dismiss(alarm.signature, t)
            alarm.transition("dismissed", t)
        else:
            self.model.record_confirm(alarm.signature, t)
            alarm.transition("confirmed", t)
        return alarm

    # -- queries ---------------------------------------------------------------------

    def list_alarms(self, state: str | None = None) -> list[Alarm]:
        alarms = [self.alarms[i] for i in self.order]
        if state is None:
            return alarms
        return [a for a in alarms if a.state == state]

    def suppressed_signatures(self, t_ms: int) -> list[str]:
        keys = {a.signature.key(): a.signature for a in self.alarms.values()}
        return sorted(k for k, sig in keys.items() if self.model.suppresses(sig, t_ms))

    def log_lines(self) -> list[str]:
        lines = []
        for alarm_id in self.order:
            alarm = self.alarms[alarm_id]
            for tr in alarm.transitions:
                lines.append(json.dumps({
                    "alarm_id": alarm.id,
                    "t_ms": tr["t_ms"],
                    "state": tr["state"],
                    "reason": tr["reason"],
                    "severity": alarm.severity,
                    "score": alarm.score,
                    "signature": alarm.signature.to_json(),
                }, ensure_ascii=False, separators=(",", ":")))
        return lines

    def write_log(self, path) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("\n".join(self.log_lines()) + ("\n" if self.order else ""),
                     encoding="utf-8")
