"""In-process publish-subscribe bus with typed topics and bounded queues.

Topics declare a schema: field kinds, optional numeric value ranges and a
queue depth. Publishing never blocks on a slow consumer; a full subscriber
queue evicts its oldest entry and the eviction is counted against that
subscriber. Out-of-range values are denied on the publisher's side (or, per
topic, flagged and delivered for downstream filtering). The bus keeps a
directory of topics, publishers and subscribers whose append-only change log
can be replayed to reconstruct the directory state exactly.

Time is carried by the publisher as integer milliseconds (``t_ms``); in
simulated runs the scenario clock supplies it, in wall-clock mode callers
map real time onto it.
"""

from __future__ import annotations

import itertools
import math
import threading
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    DuplicateTopic,
    InvalidPayload,
    InvalidSchema,
    TimeRegression,
    UnknownTopic,
)

SCALAR_KINDS = ("float", "int", "bool", "string")
WILDCARD = "*"
DEFAULT_QUEUE_DEPTH = 16
DEFAULT_WILDCARD_DEPTH = 1024

# Range handling modes. REJECT denies at publish; FLAG delivers the message
# and leaves filtering to the consumer side (used when downstream validity
# filtering is itself under test).
RANGE_REJECT = "reject"
RANGE_FLAG = "flag"


@dataclass(frozen=True)
class FieldSpec:
    """One payload field: scalar kind plus optional [lo, hi] valid range."""

    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None

    def validate(self) -> None:
        if self.kind not in SCALAR_KINDS:
            raise InvalidSchema(f"unknown field kind {self.kind!r}")
        if self.kind in ("bool", "string") and (self.lo is not None or self.hi is not None):
            raise InvalidSchema(f"field {self.name!r}: ranges apply to numeric kinds only")
        if (self.lo is None) != (self.hi is None):
            raise InvalidSchema(f"field {self.name!r}: range needs both lo and hi")
        if self.lo is not None and self.lo > self.hi:
            raise InvalidSchema(f"field {self.name!r}: range lo {self.lo} > hi {self.hi}")

    def check_kind(self, value) -> object:
        """Return the value coerced to the declared kind, or raise InvalidPayload."""
        if self.kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidPayload(f"field {self.name!r} expects float, got {value!r}")
            return float(value)
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvalidPayload(f"field {self.name!r} expects int, got {value!r}")
            return value
        if self.kind == "bool":
            if not isinstance(value, bool):
                raise InvalidPayload(f"field {self.name!r} expects bool, got {value!r}")
            return value
        if not isinstance(value, str):
            raise InvalidPayload(f"field {self.name!r} expects string, got {value!r}")
        return value

    def range_violation(self, value) -> bool:
        if self.kind not in ("float", "int"):
            return False
        if self.kind == "float" and not math.isfinite(value):
            return True
        if self.lo is None:
            return False
        return not (self.lo <= value <= self.hi)


@dataclass(frozen=True)
class TopicSchema:
    """Declared shape of one topic, including per-field valid ranges."""

    name: str
    fields: tuple[FieldSpec, ...]
    qos: int = DEFAULT_QUEUE_DEPTH

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))

    def validate(self) -> None:
        if not self.name or not self.name.startswith("/"):
            raise InvalidSchema(f"topic name must be a /-path, got {self.name!r}")
        if self.qos < 1:
            raise InvalidSchema(f"topic {self.name!r}: queue depth must be >= 1")
        seen = set()
        for f in self.fields:
            if f.name in seen:
                raise InvalidSchema(f"topic {self.name!r}: duplicate field {f.name!r}")
            seen.add(f.name)
            f.validate()

    def field_map(self) -> dict[str, FieldSpec]:
        return {f.name: f for f in self.fields}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "qos": self.qos,
            "fields": [
                {"name": f.name, "kind": f.kind}
                | ({"lo": f.lo, "hi": f.hi} if f.lo is not None else {})
                for f in self.fields
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TopicSchema":
        fields = tuple(
            FieldSpec(f["name"], f["kind"], f.get("lo"), f.get("hi")) for f in obj["fields"]
        )
        return cls(name=obj["name"], fields=fields, qos=obj.get("qos", DEFAULT_QUEUE_DEPTH))


def schema(name: str, fields: dict, qos: int = DEFAULT_QUEUE_DEPTH) -> TopicSchema:
    """Shorthand schema builder: fields maps name -> kind or (kind, lo, hi)."""
    specs = []
    for fname, spec in fields.items():
        if isinstance(spec, str):
            specs.append(FieldSpec(fname, spec))
        else:
            kind, lo, hi = spec
            specs.append(FieldSpec(fname, kind, lo, hi))
    return TopicSchema(name=name, fields=tuple(specs), qos=qos)


@dataclass(frozen=True)
class Message:
    """One delivered datum: (topic, millisecond timestamp, sequence, payload)."""

    topic: str
    t_ms: int
    seq: int
    payload: dict


@dataclass(frozen=True)
class PublishReceipt:
    accepted: bool
    seq: int
    rejected_field: str | None = None
    dropped: tuple[str, ...] = ()  # subscriber ids that evicted their oldest entry


@dataclass(frozen=True)
class ValidityEvent:
    """Record of an out-of-range publish, rejected or flag-and-delivered."""

    t_ms: int
    topic: str
    seq: int
    field: str
    value: object
    disposition: str  # "rejected_range" | "flagged"


@dataclass(frozen=True)
class DirectoryEvent:
    """One directory mutation; replaying the log rebuilds the directory."""

    epoch: int
    action: str
    topic: str | None = None
    node: str | None = None
    schema: dict | None = None
    tags: tuple[str, ...] | None = None


class BusDirectory:
    """Who publishes and subscribes to what, versioned by a change counter."""

    def __init__(self):
        self.topics: dict[str, TopicSchema] = {}
        self.publishers: dict[str, set[str]] = {}
        self.subscribers: dict[str, set[str]] = {}
        self.node_tags: dict[str, tuple[str, ...]] = {}
        self.epoch = 0

    def apply(self, ev: DirectoryEvent) -> None:
        if ev.action == "topic_added":
            self.topics[ev.topic] = TopicSchema.from_json(ev.schema)
        elif ev.action == "topic_removed":
            self.topics.pop(ev.topic, None)
        elif ev.action == "node_registered":
            self.node_tags[ev.node] = tuple(ev.tags or ())
        elif ev.action == "publisher_added":
            self.publishers.setdefault(ev.node, set()).add(ev.topic)
        elif ev.action == "publisher_removed":
            self.publishers.get(ev.node, set()).discard(ev.topic)
        elif ev.action == "subscriber_added":
            self.subscribers.setdefault(ev.node, set()).add(ev.topic)
        elif ev.action == "subscriber_removed":
            self.subscribers.get(ev.node, set()).discard(ev.topic)
        else:
            raise ValueError(f"unknown directory action {ev.action!r}")
        self.epoch = ev.epoch

    def snapshot(self) -> dict:
        return {
            "epoch": self.epoch,
            "topics": [self.topics[k].to_json() for k in sorted(self.topics)],
            "publishers": {n: sorted(t) for n, t in sorted(self.publishers.items()) if t},
            "subscribers": {n: sorted(t) for n, t in sorted(self.subscribers.items()) if t},
            "node_tags": {n: sorted(t) for n, t in sorted(self.node_tags.items())},
        }

    @classmethod
    def replay(cls, events) -> "BusDirectory":
        d = cls()
        for ev in events:
            d.apply(ev)
        return d


class Subscription:
    """A bounded per-subscriber queue; overflow evicts the oldest message."""

    def __init__(self, sub_id: str, node_id: str, pattern: str, depth: int):
        self.id = sub_id
        self.node_id = node_id
        self.pattern = pattern
        self.depth = depth
        self.dropped = 0
        self.delivered = 0
        self._queue: deque[Message] = deque()
        self._cond = threading.Condition()
        self._closed = False

    def matches(self, topic: str) -> bool:
        return self.pattern == WILDCARD or self.pattern == topic

    def _enqueue(self, msg: Message) -> bool:
        """Append without blocking. Returns True if an eviction happened."""
        with self._cond:
            evicted = False
            if len(self._queue) >= self.depth:
                self._queue.popleft()
                self.dropped += 1
                evicted = True
            self._queue.append(msg)
            self.delivered += 1
            self._cond.notify()
            return evicted

    def pop(self, timeout: float | None = None) -> Message | None:
        """Blocking pop; returns None on timeout or when closed and drained."""
        with self._cond:
            while not self._queue:
                if self._closed:
                    return None
                if not self._cond.wait(timeout=timeout):
                    return None
            return self._queue.popleft()

    def pop_nowait(self) -> Message | None:
        with self._cond:
            return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Message]:
        with self._cond:
            out = list(self._queue)
            self._queue.clear()
            return out

    def qsize(self) -> int:
        with self._cond:
            return len(self._queue)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class _TopicState:
    __slots__ = ("schema", "seq", "last_t_ms", "lock", "subs", "range_mode",
                 "published", "rejected")

    def __init__(self, schema: TopicSchema):
        self.schema = schema
        self.seq = 0
        self.last_t_ms: int | None = None
        self.lock = threading.Lock()
        self.subs: list[Subscription] = []
        self.range_mode = RANGE_REJECT
        self.published = 0
        self.rejected = 0


class TopicHandle:
    """Opaque publish handle returned by create_topic."""

    __slots__ = ("name", "_bus")

    def __init__(self, name: str, bus: "Bus"):
        self.name = name
        self._bus = bus

    def publish(self, payload: dict, t_ms: int) -> PublishReceipt:
        return self._bus.publish(self, payload, t_ms)


class Bus:
    """The in-process message bus. Safe for concurrent publish/subscribe."""

    def __init__(self):
        self._lock = threading.RLock()
        self._topics: dict[str, _TopicState] = {}
        self._subs: dict[str, Subscription] = {}
        self._sub_ids = itertools.count(1)
        self.directory = BusDirectory()
        self.directory_log: list[DirectoryEvent] = []
        self.validity_log: list[ValidityEvent] = []
        self._validity_watchers: list = []
        self._directory_watchers: list = []
        self._record_taps: list = []

    # -- directory ------------------------------------------------------

    def _emit_directory(self, action: str, **kw) -> None:
        ev = DirectoryEvent(epoch=self.directory.epoch + 1, action=action, **kw)
        self.directory.apply(ev)
        self.directory_log.append(ev)
        for fn in list(self._directory_watchers):
            fn(ev)

    def add_directory_watcher(self, fn) -> None:
        """fn(DirectoryEvent); called synchronously on every directory change."""
        with self._lock:
            self._directory_watchers.append(fn)

    def add_validity_watcher(self, fn) -> None:
        """fn(ValidityEvent); called synchronously, in publish order per topic."""
        with self._lock:
            self._validity_watchers.append(fn)

    def add_record_tap(self, fn) -> None:
        """Recorder hook: fn(Message, validity) for every publish attempt.

        Taps see rejected and flagged publishes too, in exact publish order;
        normal subscribers never receive rejected messages. Taps must be
        cheap and non-blocking (called on the publisher's path).
        """
        with self._lock:
            self._record_taps.append(fn)

    def remove_record_tap(self, fn) -> None:
        with self._lock:
            if fn in self._record_taps:
                self._record_taps.remove(fn)

    def register_node(self, node_id: str, tags=()) -> None:
        with self._lock:
            self._emit_directory("node_registered", node=node_id, tags=tuple(tags))

    # -- topics -----------------------------------------------------------

    def create_topic(self, schema: TopicSchema, publisher: str | None = None) -> TopicHandle:
        schema.validate()
        with self._lock:
            if schema.name in self._topics:
                raise DuplicateTopic(schema.name)
            state = _TopicState(schema)
            # wildcard subscriptions attach to topics created later
            for sub in self._subs.values():
                if sub.pattern == WILDCARD:
                    state.subs.append(sub)
            self._topics[schema.name] = state
            self._emit_directory("topic_added", topic=schema.name, schema=schema.to_json())
            if publisher is not None:
                self._emit_directory("publisher_added", node=publisher, topic=schema.name)
            return TopicHandle(schema.name, self)

    def remove_topic(self, name: str) -> None:
        with self._lock:
            if name not in self._topics:
                raise UnknownTopic(name)
            del self._topics[name]
            for node, topics in self.directory.publishers.items():
                if name in topics:
                    self._emit_directory("publisher_removed", node=node, topic=name)
            for node, topics in self.directory.subscribers.items():
                if name in topics:
                    self._emit_directory("subscriber_removed", node=node, topic=name)
            self._emit_directory("topic_removed", topic=name)

    def advertise(self, node_id: str, topic: str) -> None:
        with self._lock:
            if topic not in self._topics:
                raise UnknownTopic(topic)
            if topic not in self.directory.publishers.get(node_id, set()):
                self._emit_directory("publisher_added", node=node_id, topic=topic)

    def set_range_mode(self, topic: str, mode: str) -> None:
        """Per-topic override: RANGE_REJECT (default) or RANGE_FLAG."""
        if mode not in (RANGE_REJECT, RANGE_FLAG):
            raise ValueError(f"unknown range mode {mode!r}")
        with self._lock:
            state = self._topics.get(topic)
            if state is None:
                raise UnknownTopic(topic)
            state.range_mode = mode

    def has_topic(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def topic_names(self) -> list[str]:
        with self._lock:
            return list(self._topics)

    def get_schema(self, name: str) -> TopicSchema:
        with self._lock:
            state = self._topics.get(name)
            if state is None:
                raise UnknownTopic(name)
            return state.schema

    def handle(self, name: str) -> TopicHandle:
        with self._lock:
            if name not in self._topics:
                raise UnknownTopic(name)
            return TopicHandle(name, self)

    # -- subscribe --------------------------------------------------------

    def subscribe(self, node_id: str, pattern: str, depth: int | None = None) -> Subscription:
        with self._lock:
            if pattern != WILDCARD and pattern not in self._topics:
                raise UnknownTopic(pattern)
            if depth is None:
                if pattern == WILDCARD:
                    depth = DEFAULT_WILDCARD_DEPTH
                else:
                    depth = self._topics[pattern].schema.qos
            sub = Subscription(f"sub-{next(self._sub_ids)}", node_id, pattern, depth)
            self._subs[sub.id] = sub
            if pattern == WILDCARD:
                for state in self._topics.values():
                    state.subs.append(sub)
            else:
                self._topics[pattern].subs.append(sub)
                self._emit_directory("subscriber_added", node=node_id, topic=pattern)
            return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs.pop(sub.id, None)
            for name, state in self._topics.items():
                if sub in state.subs:
                    state.subs.remove(sub)
                    if sub.pattern != WILDCARD:
                        self._emit_directory("subscriber_removed", node=sub.node_id, topic=name)
            sub.close()

    # -- publish ----------------------------------------------------------

    def publish(self, topic, payload: dict, t_ms: int) -> PublishReceipt:
        name = topic.name if isinstance(topic, TopicHandle) else topic
        with self._lock:
            state = self._topics.get(name)
        if state is None:
            raise UnknownTopic(name)

        with state.lock:
            schema_fields = state.schema.field_map()
            if set(payload) != set(schema_fields):
                raise InvalidPayload(
                    f"topic {name}: payload fields {sorted(payload)} != "
                    f"schema fields {sorted(schema_fields)}"
                )
            if state.last_t_ms is not None and t_ms < state.last_t_ms:
                raise TimeRegression(f"topic {name}: t_ms {t_ms} < {state.last_t_ms}")

            coerced = {f.name: f.check_kind(payload[f.name]) for f in state.schema.fields}

            state.seq += 1
            state.last_t_ms = t_ms
            seq = state.seq

            violation = None
            for f in state.schema.fields:
                if f.range_violation(coerced[f.name]):
                    violation = f
                    break

            msg = Message(topic=name, t_ms=t_ms, seq=seq, payload=coerced)

            if violation is not None:
                disposition = (
                    "rejected_range" if state.range_mode == RANGE_REJECT else "flagged"
                )
                ev = ValidityEvent(
                    t_ms=t_ms, topic=name, seq=seq,
                    field=violation.name, value=coerced[violation.name],
                    disposition=disposition,
                )
                self.validity_log.append(ev)
                for fn in list(self._validity_watchers):
                    fn(ev)
                for fn in list(self._record_taps):
                    fn(msg, disposition)
                if disposition == "rejected_range":
                    state.rejected += 1
                    return PublishReceipt(accepted=False, seq=seq,
                                          rejected_field=violation.name)
            else:
                for fn in list(self._record_taps):
                    fn(msg, "ok")

            dropped = []
            for sub in state.subs:
                if sub._enqueue(msg):
                    dropped.append(sub.id)
            state.published += 1
            return PublishReceipt(accepted=True, seq=seq, dropped=tuple(dropped))

    # -- introspection ------------------------------------------------------

    def metrics(self) -> dict:
        with self._lock:
            topics = {}
            for name in sorted(self._topics):
                st = self._topics[name]
                topics[name] = {
                    "published": st.published,
                    "rejected": st.rejected,
                    "qos": st.schema.qos,
                    "subscriber_count": len(st.subs),
                }
            subs = [
                {
                    "id": s.id,
                    "node": s.node_id,
                    "pattern": s.pattern,
                    "depth": s.depth,
                    "queued": s.qsize(),
                    "delivered": s.delivered,
                    "dropped": s.dropped,
                }
                for s in self._subs.values()
            ]
            return {"topics": topics, "subscriptions": subs,
                    "validity_events": len(self.validity_log)}
