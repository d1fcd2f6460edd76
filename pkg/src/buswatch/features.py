"""Streaming message-timing features over tumbling windows.

Per window we compute: message rate per topic and across all topics, a
calendar bucket (hour of day, day of week), and cross-topic following
frequency: for each ordered topic pair (a, b), the fraction of a-messages
that had at least one b-message within the lag window L after them.

Aggregation state is mergeable: a PartialAggregate built over any subset of
a window's records can be merged with others to give exactly the same
finalized frame as a single pass over the union. Partials carry per-topic
event timestamps (a few bytes per message, no payloads) rather than bare
counts; that keeps cross-topic follow pairs exact even when the record
stream is split across sites, at a fraction of the cost of forwarding raw
records.
"""

from __future__ import annotations

import json
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .errors import TimeRegression, WindowMismatch, ZeroWindow

DEFAULT_WINDOW_MS = 1000
DEFAULT_LAG_MS = 100

WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class Window:
    start_ms: int
    end_ms: int

    def contains(self, t_ms: int) -> bool:
        return self.start_ms <= t_ms < self.end_ms

    @property
    def length_ms(self) -> int:
        return self.end_ms - self.start_ms


class CalendarMap:
    """Maps scenario-epoch milliseconds onto a synthetic wall-clock calendar."""

    def __init__(self, epoch_iso: str = "2024-01-01T00:00:00"):
        self.epoch = datetime.fromisoformat(epoch_iso)

    def bucket(self, t_ms: int) -> dict:
        dt = self.epoch + timedelta(milliseconds=t_ms)
        return {
            "hour": dt.hour,
            "weekday": dt.weekday(),
            "id": f"{WEEKDAYS[dt.weekday()]}-{dt.hour:02d}",
        }


@dataclass(frozen=True)
class FeatureFrame:
    """Finalized features for one closed window."""

    window: Window
    per_topic_rate: dict
    total_rate: float
    time_bucket: dict
    co_occurrence: dict  # nested: {topic_a: {topic_b: fraction}}

    def rate(self, topic: str) -> float:
        return self.per_topic_rate.get(topic, 0.0)

    def co(self, a: str, b: str) -> float | None:
        return self.co_occurrence.get(a, {}).get(b)

    def to_json(self) -> dict:
        return {
            "window": [self.window.start_ms, self.window.end_ms],
            "per_topic_rate": {k: self.per_topic_rate[k] for k in sorted(self.per_topic_rate)},
            "total_rate": self.total_rate,
            "time_bucket": self.time_bucket,
            "co_occurrence": {
                a: {b: self.co_occurrence[a][b] for b in sorted(self.co_occurrence[a])}
                for a in sorted(self.co_occurrence)
            },
        }

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


class PartialAggregate:
    """Window-scoped aggregation state; merging partials is exact."""

    def __init__(self, window: Window):
        self.window = window
        self.events: dict[str, list[int]] = {}  # topic -> sorted t_ms list

    def add(self, topic: str, t_ms: int) -> None:
        if not self.window.contains(t_ms):
            raise WindowMismatch(f"t_ms {t_ms} outside window {self.window}")
        insort(self.events.setdefault(topic, []), t_ms)

    @property
    def per_topic_count(self) -> dict:
        return {t: len(ts) for t, ts in self.events.items()}

    def source_count(self, topic: str) -> int:
        return len(self.events.get(topic, ()))

    def follow_count(self, a: str, b: str, lag_ms: int) -> int:
        """How many a-messages saw at least one b strictly after, within lag_ms."""
        b_times = self.events.get(b)
        if not b_times:
            return 0
        count = 0
        for t_a in self.events.get(a, ()):
            i = bisect_right(b_times, t_a)
            if i < len(b_times) and b_times[i] <= t_a + lag_ms:
                count += 1
        return count

    def records_in(self) -> int:
        return sum(len(ts) for ts in self.events.values())

    def serialized_size(self) -> int:
        """Bytes needed to forward this partial over a link."""
        return len(json.dumps(self.to_json(), separators=(",", ":")))

    def to_json(self) -> dict:
        return {
            "window": [self.window.start_ms, self.window.end_ms],
            "events": {t: self.events[t] for t in sorted(self.events)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PartialAggregate":
        p = cls(Window(obj["window"][0], obj["window"][1]))
        for topic, ts in obj["events"].items():
            p.events[topic] = list(ts)
        return p

    def copy(self) -> "PartialAggregate":
        p = PartialAggregate(self.window)
        p.events = {t: list(ts) for t, ts in self.events.items()}
        return p


def merge(p1: PartialAggregate, p2: PartialAggregate) -> PartialAggregate:
    """Merge two partials over the same window (field-wise union of events)."""
    if p1.window != p2.window:
        raise WindowMismatch(f"{p1.window} != {p2.window}")
    out = p1.copy()
    for topic, ts in p2.events.items():
        for t in ts:
            insort(out.events.setdefault(topic, []), t)
    return out


def finalize(partial: PartialAggregate, lag_ms: int = DEFAULT_LAG_MS,
             calendar: CalendarMap | None = None) -> FeatureFrame:
    """Close a window: counts become rates, follow counts become fractions.

    Pairs whose source topic has no messages are omitted rather than
    reported as 0/0.
    """
    win = partial.window
    if win.length_ms <= 0:
        raise ZeroWindow(f"window {win} has no duration")
    calendar = calendar or CalendarMap()
    per_topic_rate = {
        t: n * 1000.0 / win.length_ms for t, n in sorted(partial.per_topic_count.items())
    }
    total = sum(partial.per_topic_count.values()) * 1000.0 / win.length_ms
    topics = [t for t, n in sorted(partial.per_topic_count.items()) if n > 0]
    co: dict[str, dict[str, float]] = {}
    for a in topics:
        src = partial.source_count(a)
        for b in topics:
            if a == b:
                continue
            co.setdefault(a, {})[b] = partial.follow_count(a, b, lag_ms) / src
    return FeatureFrame(
        window=win,
        per_topic_rate=per_topic_rate,
        total_rate=total,
        time_bucket=calendar.bucket(win.start_ms),
        co_occurrence=co,
    )


class FeatureState:
    """Single-consumer streaming aggregator emitting frames on window close.

    Windows tumble on fixed boundaries (start aligned to window_ms
    multiples). Quiet stretches still produce frames: advancing the clock
    past a window boundary emits an empty frame for every elapsed window,
    so downstream detectors see rate drops instead of silence.
    """

    def __init__(self, window_ms: int = DEFAULT_WINDOW_MS, lag_ms: int = DEFAULT_LAG_MS,
                 calendar: CalendarMap | None = None, start_ms: int = 0,
                 keep_closed_partials: bool = False):
        if window_ms <= 0:
            raise ZeroWindow("window_ms must be positive")
        self.window_ms = window_ms
        self.lag_ms = lag_ms
        self.calendar = calendar or CalendarMap()
        self._partial = PartialAggregate(Window(start_ms, start_ms + window_ms))
        self.frames_emitted = 0
        self.closed_partials: list[PartialAggregate] | None = (
            [] if keep_closed_partials else None)

    @property
    def current_window(self) -> Window:
        return self._partial.window

    def take_partial(self) -> PartialAggregate:
        """Swap out the current partial (used by local-reduction placement)."""
        p = self._partial
        return p

    def _roll(self) -> PartialAggregate:
        closed = self._partial
        nxt = Window(closed.window.end_ms, closed.window.end_ms + self.window_ms)
        self._partial = PartialAggregate(nxt)
        if self.closed_partials is not None:
            self.closed_partials.append(closed)
        return closed

    def advance_to(self, t_ms: int) -> list[FeatureFrame]:
        """Emit finalized frames for every window that ends at or before t_ms."""
        frames = []
        while t_ms >= self._partial.window.end_ms:
            closed = self._roll()
            frames.append(finalize(closed, self.lag_ms, self.calendar))
            self.frames_emitted += 1
        return frames

    def ingest(self, topic: str, t_ms: int) -> list[FeatureFrame]:
        """Fold one record in; returns any frames closed by its timestamp."""
        if t_ms < self._partial.window.start_ms:
            raise TimeRegression(
                f"t_ms {t_ms} precedes open window {self._partial.window}")
        frames = self.advance_to(t_ms)
        self._partial.add(topic, t_ms)
        return frames

    def state_dict(self) -> dict:
        return {
            "window_ms": self.window_ms,
            "lag_ms": self.lag_ms,
            "partial": self._partial.to_json(),
            "frames_emitted": self.frames_emitted,
        }

    def load_state_dict(self, state: dict) -> None:
        self.window_ms = state["window_ms"]
        self.lag_ms = state["lag_ms"]
        self._partial = PartialAggregate.from_json(state["partial"])
        self.frames_emitted = state["frames_emitted"]


def single_pass_frames(records, window_ms=DEFAULT_WINDOW_MS, lag_ms=DEFAULT_LAG_MS,
                       calendar=None, end_ms=None) -> list[FeatureFrame]:
    """Convenience: run a record iterable straight through one FeatureState."""
    state = FeatureState(window_ms=window_ms, lag_ms=lag_ms, calendar=calendar)
    frames = []
    for rec in records:
        frames.extend(state.ingest(rec.topic, rec.t_ms))
    if end_ms is not None:
        frames.extend(state.advance_to(end_ms))
    return frames
