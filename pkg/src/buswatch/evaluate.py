"""Scoring a run's alarms against its ground-truth injection labels.

An injection counts as detected when at least one presented anomaly alarm
(a) lands inside the injection interval padded by one feature window on
each side - detector latency of one tumbling window is inherent, not a
miss - and (b) names a topic the injection actually perturbs. Presented
anomaly alarms attributable to no true injection count as false alarms;
that includes anything alarmed during an invalid-data (sensor splash)
interval, which is labeled expected_detection=false.

Recovery transients: the maneuver that re-acquires the path right after an
injection ends can itself trip detectors. Alarms landing in a settle
window after a true injection (topic-matched) are attributed to that
injection - they neither count as detections nor as false alarms.

Assumption-change and stop/escalation alarms are separate alert classes
and are not scored here.
"""

from __future__ import annotations

import json
from pathlib import Path

from .alarmdesk import ANOMALY_KINDS
from .capture import read_trace
from .errors import MalformedInput
from .simbot import PERTURBED_TOPICS, GroundTruthLabel


def target_topics(target: str) -> list[str] | None:
    """Topics a detector target refers to; None means matches any topic."""
    topics = []
    for part in str(target).split("+"):
        head, _, rest = part.partition(":")
        if part == "total_rate":
            return None  # aggregate over everything
        if head in ("rate",):
            topics.append(rest)
        elif head in ("value", "absvalue"):
            topics.append(rest.rpartition(":")[0])
        elif head in ("co", "ratio"):
            a, _, b = rest.partition(":")
            topics.extend([a, b])
        elif head == "group":
            continue  # group targets resolve to member topics we don't track here
    return topics


def load_labels(path) -> list[GroundTruthLabel]:
    labels = []
    try:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                labels.append(GroundTruthLabel.from_json(json.loads(line)))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise MalformedInput(f"labels: {exc}") from exc
    return labels


def load_presented_anomaly_alarms(path) -> list[dict]:
    """Presented alarms of the anomaly kinds, one entry per alarm."""
    presented = {}
    try:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry["state"] != "presented":
                continue
            if entry["signature"]["kind"] not in ANOMALY_KINDS:
                continue
            presented.setdefault(entry["alarm_id"], entry)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise MalformedInput(f"alarms: {exc}") from exc
    return list(presented.values())


DEFAULT_SETTLE_MS = 6000


def evaluate(trace_path, labels_path, alarms_path, window_ms: int = 1000,
             settle_ms: int = DEFAULT_SETTLE_MS) -> dict:
    """Pure function of the three run artifacts; re-running never changes it."""
    records = read_trace(trace_path)
    labels = load_labels(labels_path)
    alarms = load_presented_anomaly_alarms(alarms_path)
    duration_ms = records[-1].t_ms if records else 0

    def topic_match(alarm, label) -> bool:
        topics = target_topics(alarm["signature"]["target"])
        if topics is None:
            return True
        perturbed = PERTURBED_TOPICS[label.kind]
        return any(t in perturbed for t in topics)

    def alarm_matches(alarm, label) -> bool:
        t = alarm["t_ms"]
        if not (label.start_ms - window_ms <= t <= label.end_ms + window_ms):
            return False
        return topic_match(alarm, label)

    def in_settle_shadow(alarm, label) -> bool:
        t = alarm["t_ms"]
        if not (label.start_ms - window_ms <= t
                <= label.end_ms + max(window_ms, settle_ms)):
            return False
        if topic_match(alarm, label):
            return True
        # the reacquisition maneuver always plays out in command and odometry
        topics = target_topics(alarm["signature"]["target"])
        return topics is not None and any(t in ("/cmd_vel", "/odom")
                                          for t in topics)

    true_labels = [l for l in labels if l.expected_detection]
    per_kind: dict[str, dict] = {}
    detected_count = 0
    attributed_alarm_ids = set()
    for label in true_labels:
        hits = [a for a in alarms if alarm_matches(a, label)]
        detected = bool(hits)
        detected_count += detected
        attributed_alarm_ids.update(
            a["alarm_id"] for a in alarms if in_settle_shadow(a, label))
        slot = per_kind.setdefault(label.kind, {"total": 0, "detected": 0})
        slot["total"] += 1
        slot["detected"] += detected

    false_alarms = [a for a in alarms if a["alarm_id"] not in attributed_alarm_ids]
    minutes = duration_ms / 60_000.0
    report = {
        "injections": len(true_labels),
        "detected": detected_count,
        "recall": (detected_count / len(true_labels)) if true_labels else None,
        "presented_anomaly_alarms": len(alarms),
        "false_alarms": len(false_alarms),
        "false_alarm_rate_per_min": (len(false_alarms) / minutes) if minutes else 0.0,
        "per_kind": dict(sorted(per_kind.items())),
        "duration_ms": duration_ms,
        "invalid_data_labels": len(labels) - len(true_labels),
    }
    return report


def evaluate_run_dir(run_dir, window_ms: int | None = None) -> dict:
    run = Path(run_dir)
    if window_ms is None:
        meta_path = run / "meta.json"
        window_ms = 1000
        if meta_path.exists():
            window_ms = json.loads(meta_path.read_text(encoding="utf-8")).get(
                "window_ms", 1000)
    report = evaluate(run / "trace.jsonl", run / "labels.jsonl",
                      run / "alarms.jsonl", window_ms=window_ms)
    (run / "eval.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def format_report(report: dict) -> str:
    lines = [
        f"injections:        {report['injections']}",
        f"detected:          {report['detected']}",
        f"recall:            "
        + ("n/a" if report["recall"] is None else f"{report['recall']:.2f}"),
        f"false alarms/min:  {report['false_alarm_rate_per_min']:.3f}",
    ]
    for kind, slot in report["per_kind"].items():
        lines.append(f"  {kind:<24} {slot['detected']}/{slot['total']}")
    return "\n".join(lines)
