"""All-topic trace recorder and trace file tooling.

The canonical trace format is line-delimited JSON: one record per line,
UTF-8, keys in fixed order (t_ms, topic, seq, validity, payload). It is
append-only and crash tolerant. Export to CSV and YAML is lossless: CSV
cells carry JSON-encoded scalars so types survive the round trip, and a
missing cell means the field was absent.

Recording is decoupled from the system under observation: every publish
attempt is appended to a bounded capture queue (evict-oldest, counted) and
a dedicated writer drains it, so sink latency never delays a publisher and
live subscribers keep receiving 100% of messages regardless of capture
backlog.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import MalformedTrace, SinkUnwritable, UnknownFormat
from .msgbus import Bus, Message, TopicSchema

TRACE_SUFFIX = ".trace.jsonl"
DEFAULT_CAPTURE_DEPTH = 4096

VALIDITY_STATES = ("ok", "rejected_range", "flagged")


@dataclass(frozen=True)
class TraceRecord:
    """One captured publish attempt, delivered or not."""

    t_ms: int
    topic: str
    seq: int
    payload: dict
    validity: str = "ok"

    def to_json(self) -> dict:
        return {
            "t_ms": self.t_ms,
            "topic": self.topic,
            "seq": self.seq,
            "validity": self.validity,
            "payload": self.payload,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TraceRecord":
        try:
            rec = cls(
                t_ms=obj["t_ms"],
                topic=obj["topic"],
                seq=obj["seq"],
                payload=obj["payload"],
                validity=obj.get("validity", "ok"),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedTrace(f"bad record {obj!r}: {exc}") from exc
        if not isinstance(rec.t_ms, int) or not isinstance(rec.seq, int):
            raise MalformedTrace(f"t_ms/seq must be ints in {obj!r}")
        if not isinstance(rec.payload, dict) or not isinstance(rec.topic, str):
            raise MalformedTrace(f"bad topic/payload in {obj!r}")
        if rec.validity not in VALIDITY_STATES:
            raise MalformedTrace(f"unknown validity {rec.validity!r}")
        return rec


def record_line(rec: TraceRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False, separators=(",", ":"),
                      allow_nan=False)


@dataclass
class CaptureStats:
    records_enqueued: int = 0
    records_written: int = 0
    capture_drops: int = 0
    topics_seen: list[str] = field(default_factory=list)


class JsonlTraceSink:
    """Default sink: append canonical trace lines to a file."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")
        except OSError as exc:
            raise SinkUnwritable(str(exc)) from exc

    def write(self, rec: TraceRecord) -> None:
        self._fh.write(record_line(rec))
        self._fh.write("\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


class CaptureSession:
    """Wildcard recorder: taps every publish attempt on the bus.

    Topics created after the session starts are captured from their first
    message. The tap appends to a bounded queue without blocking; evictions
    are counted, never silent.
    """

    def __init__(self, bus: Bus, sink, queue_depth: int = DEFAULT_CAPTURE_DEPTH):
        self._bus = bus
        self._sink = sink
        self._depth = queue_depth
        self._queue: deque[TraceRecord] = deque()
        self._cond = threading.Condition()
        self._stopping = False
        self._enqueued = 0
        self._written = 0
        self._drops = 0
        self._topics: dict[str, None] = {}
        bus.add_record_tap(self._on_record)
        self._writer = threading.Thread(target=self._writer_loop, daemon=True)
        self._writer.start()

    # Called synchronously from Bus.publish; must stay O(1) and non-blocking.
    def _on_record(self, msg: Message, validity: str) -> None:
        rec = TraceRecord(t_ms=msg.t_ms, topic=msg.topic, seq=msg.seq,
                          payload=msg.payload, validity=validity)
        with self._cond:
            if self._stopping:
                return
            if len(self._queue) >= self._depth:
                self._queue.popleft()
                self._drops += 1
            self._queue.append(rec)
            self._enqueued += 1
            self._topics.setdefault(msg.topic)
            self._cond.notify()

    def _writer_loop(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._stopping:
                    self._cond.wait(timeout=0.05)
                if self._stopping and not self._queue:
                    return
                rec = self._queue.popleft() if self._queue else None
            if rec is not None:
                self._sink.write(rec)
                with self._cond:
                    self._written += 1

    def stop(self, drain: bool = True) -> CaptureStats:
        """Stop recording. With drain=False, still-queued records count as drops."""
        self._bus.remove_record_tap(self._on_record)
        with self._cond:
            if not drain:
                self._drops += len(self._queue)
                self._queue.clear()
            self._stopping = True
            self._cond.notify_all()
        self._writer.join(timeout=30)
        if hasattr(self._sink, "close"):
            self._sink.close()
        return self.stats()

    def stats(self) -> CaptureStats:
        with self._cond:
            return CaptureStats(
                records_enqueued=self._enqueued,
                records_written=self._written,
                capture_drops=self._drops,
                topics_seen=sorted(self._topics),
            )


def start_capture(bus: Bus, sink, queue_depth: int = DEFAULT_CAPTURE_DEPTH) -> CaptureSession:
    """Start recording every topic on the bus into sink.

    sink is a path (canonical jsonl trace file) or any object with a
    write(TraceRecord) method.
    """
    if isinstance(sink, (str, Path)):
        sink = JsonlTraceSink(sink)
    elif not hasattr(sink, "write"):
        raise SinkUnwritable(f"sink {sink!r} has no write()")
    return CaptureSession(bus, sink, queue_depth=queue_depth)


# -- trace files ----------------------------------------------------------


def write_trace(path, records) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_line(rec))
            fh.write("\n")


def read_trace(path) -> list[TraceRecord]:
    """Parse and validate a canonical trace file."""
    records = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise MalformedTrace(str(exc)) from exc
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"line {i}: {exc}") from exc
        records.append(TraceRecord.from_json(obj))
    _validate_trace(records)
    return records


def _validate_trace(records) -> None:
    seen = set()
    last_t = None
    for rec in records:
        key = (rec.topic, rec.seq)
        if key in seen:
            raise MalformedTrace(f"duplicate (topic, seq) {key}")
        seen.add(key)
        if last_t is not None and rec.t_ms < last_t:
            raise MalformedTrace(f"t_ms regression at {key}")
        last_t = rec.t_ms


# -- export / import ------------------------------------------------------

EXPORT_FORMATS = ("jsonl", "csv", "yaml")


def _payload_columns(records) -> list[str]:
    cols = set()
    for rec in records:
        cols.update(rec.payload)
    return sorted(cols)


def export_records(records, fmt: str, out_path) -> Path:
    """Write records in the requested format. Lossless for all three."""
    if fmt not in EXPORT_FORMATS:
        raise UnknownFormat(f"{fmt!r} (supported: {', '.join(EXPORT_FORMATS)})")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        write_trace(out, records)
    elif fmt == "csv":
        cols = _payload_columns(records)
        with out.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "topic", "seq", "validity"] + cols)
            for rec in records:
                row = [rec.t_ms, rec.topic, rec.seq, rec.validity]
                for c in cols:
                    if c in rec.payload:
                        row.append(json.dumps(rec.payload[c], ensure_ascii=False,
                                              allow_nan=False))
                    else:
                        row.append("")
                w.writerow(row)
    else:
        docs = [rec.to_json() for rec in records]
        with out.open("w", encoding="utf-8") as fh:
            yaml.safe_dump(docs, fh, sort_keys=False, allow_unicode=True,
                           default_flow_style=False)
    return out


def import_records(path, fmt: str) -> list[TraceRecord]:
    if fmt not in EXPORT_FORMATS:
        raise UnknownFormat(fmt)
    p = Path(path)
    if fmt == "jsonl":
        return read_trace(p)
    if fmt == "csv":
        records = []
        try:
            with p.open("r", encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is None or header[:4] != ["t_ms", "topic", "seq", "validity"]:
                    raise MalformedTrace(f"bad csv header in {p}")
                cols = header[4:]
                for row in reader:
                    payload = {}
                    for c, cell in zip(cols, row[4:]):
                        if cell != "":
                            payload[c] = json.loads(cell)
                    records.append(TraceRecord(
                        t_ms=int(row[0]), topic=row[1], seq=int(row[2]),
                        payload=payload, validity=row[3]))
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise MalformedTrace(str(exc)) from exc
        _validate_trace(records)
        return records
    try:
        docs = yaml.safe_load(p.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise MalformedTrace(str(exc)) from exc
    if docs is None:
        docs = []
    records = [TraceRecord.from_json(d) for d in docs]
    _validate_trace(records)
    return records


def export_trace(trace_path, fmt: str, out_path=None) -> Path:
    """Convert a canonical trace file into fmt (jsonl passthrough included)."""
    records = read_trace(trace_path)
    if out_path is None:
        ext = {"jsonl": ".jsonl", "csv": ".csv", "yaml": ".yaml"}.get(fmt)
        if ext is None:
            raise UnknownFormat(fmt)
        out_path = Path(trace_path).with_suffix(ext)
    return export_records(records, fmt, out_path)


# -- replay ---------------------------------------------------------------


def save_topic_snapshot(path, bus: Bus) -> None:
    """Persist topic schemas and range modes so a trace can be replayed."""
    snap = {
        "schemas": [bus.get_schema(n).to_json() for n in sorted(bus.topic_names())],
        "range_modes": {n: bus._topics[n].range_mode for n in sorted(bus.topic_names())},
    }
    Path(path).write_text(json.dumps(snap, indent=2, ensure_ascii=False), encoding="utf-8")


def load_topic_snapshot(path) -> tuple[list[TopicSchema], dict]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TopicSchema.from_json(s) for s in obj["schemas"]], obj.get("range_modes", {})


def infer_schemas(records) -> list[TopicSchema]:
    """Fallback schemas (kinds only, no ranges) inferred from trace payloads."""
    from .msgbus import FieldSpec

    by_topic: dict[str, dict[str, str]] = {}
    for rec in records:
        kinds = by_topic.setdefault(rec.topic, {})
        for name, value in rec.payload.items():
            if isinstance(value, bool):
                kinds[name] = "bool"
            elif isinstance(value, int):
                kinds[name] = "int"
            elif isinstance(value, float):
                kinds[name] = "float"
            else:
                kinds[name] = "string"
    return [
        TopicSchema(name=t, fields=tuple(FieldSpec(n, k) for n, k in sorted(f.items())))
        for t, f in sorted(by_topic.items())
    ]


def replay_trace(records, bus: Bus, schemas=None, range_modes=None) -> int:
    """Publish a trace into a fresh bus, reproducing seq numbers exactly.

    The trace holds every publish attempt, so re-publishing in order (and
    letting the bus re-reject out-of-range payloads) reconstructs the
    original stream.
    """
    if schemas is None:
        schemas = infer_schemas(records)
    for sc in schemas:
        bus.create_topic(sc)
    for topic, mode in (range_modes or {}).items():
        bus.set_range_mode(topic, mode)
    count = 0
    for rec in records:
        bus.publish(rec.topic, rec.payload, rec.t_ms)
        count += 1
    return count
