"""Anomaly response: snapshots, guarded restores, shadows, and safe mode.

Snapshots capture a node's serialized state only while the node is healthy
(no anomaly events attributed to it inside the recent health window), so a
restore always lands on known-good state. State is copied between windows,
where it is quiescent, so capture never pauses message processing.

Restores are guarded against deterministic faults: if the same (node,
fault signature) keeps coming back, automatic restore stops after k_max
attempts per guard window and a single critical escalation is raised
instead of looping forever.

A shadow is a replica of a node fed every d-th input (lower quality of
service). Promoting a warm shadow swaps it in as primary at the next
window; the old primary is reset and takes over shadow duty.

Safe mode is the minimal-capability state: detectors pause, the envelope
and e-stop path stay live, capture keeps recording, and teleop commands
survive with speed clamped to normal bounds.
"""

from __future__ import annotations

import copy
import json
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CycleGuardTripped, NodeUnhealthy, NoSnapshot, ShadowCold

DEFAULT_HEALTH_WINDOW_MS = 5000
DEFAULT_K_MAX = 3
DEFAULT_CYCLE_WINDOW_MS = 60_000


@dataclass(frozen=True)
class Snapshot:
    node_id: str
    t_ms: int
    state: dict
    healthy_window_ms: int  # anomaly-free span preceding capture

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "t_ms": self.t_ms,
                "state": self.state, "healthy_window_ms": self.healthy_window_ms}

    @classmethod
    def from_json(cls, obj: dict) -> "Snapshot":
        return cls(node_id=obj["node_id"], t_ms=obj["t_ms"],
                   state=obj["state"], healthy_window_ms=obj["healthy_window_ms"])


@dataclass(frozen=True)
class RestoreReport:
    node_id: str
    snapshot_t_ms: int
    restored_at_ms: int
    fault_signature: str
    attempts_in_window: int


class HealthTracker:
    """Recency of anomaly events per node."""

    def __init__(self, window_ms: int = DEFAULT_HEALTH_WINDOW_MS):
        self.window_ms = window_ms
        self._marks: dict[str, int] = {}
        self._first_seen: dict[str, int] = {}

    def mark(self, node_id: str, t_ms: int) -> None:
        self._marks[node_id] = max(t_ms, self._marks.get(node_id, t_ms))

    def observe(self, node_id: str, t_ms: int) -> None:
        self._first_seen.setdefault(node_id, t_ms)

    def healthy(self, node_id: str, now_ms: int) -> bool:
        last = self._marks.get(node_id)
        return last is None or now_ms - last >= self.window_ms

    def anomaly_free_ms(self, node_id: str, now_ms: int) -> int:
        last = self._marks.get(node_id)
        if last is not None:
            return max(0, now_ms - last)
        first = self._first_seen.get(node_id, now_ms)
        return max(0, now_ms - first)


class SnapshotStore:
    """Versioned snapshot files: <root>/<node>/<t_ms>.json."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._memory: dict[str, list[Snapshot]] = {}

    def save(self, snap: Snapshot) -> Snapshot:
        self._memory.setdefault(snap.node_id, []).append(snap)
        if self.root is not None:
            node_dir = self.root / snap.node_id.replace("/", "_")
            node_dir.mkdir(parents=True, exist_ok=True)
            path = node_dir / f"{snap.t_ms}.json"
            path.write_text(json.dumps(snap.to_json(), indent=2, ensure_ascii=False),
                            encoding="utf-8")
        return snap

    def latest(self, node_id: str) -> Snapshot | None:
        snaps = self._memory.get(node_id)
        return snaps[-1] if snaps else None

    def all_for(self, node_id: str) -> list[Snapshot]:
        return list(self._memory.get(node_id, ()))


class CycleGuard:
    """Caps automatic restores per (node, fault signature) per window."""

    def __init__(self, k_max: int = DEFAULT_K_MAX,
                 window_ms: int = DEFAULT_CYCLE_WINDOW_MS):
        self.k_max = k_max
        self.window_ms = window_ms
        self._history: dict[tuple, deque] = {}
        self._tripped: set = set()

    def record(self, node_id: str, signature: str, t_ms: int) -> int:
        """Register a restore attempt; raises CycleGuardTripped at the cap.

        Returns the attempt count inside the current window. A trip is
        latched (until reset) and raised exactly once per latch.
        """
        key = (node_id, signature)
        if key in self._tripped:
            raise CycleGuardTripped(
                f"{node_id}: auto-restore disabled for {signature!r}")
        hist = self._history.setdefault(key, deque())
        while hist and hist[0] <= t_ms - self.window_ms:
            hist.popleft()
        if len(hist) >= self.k_max:
            self._tripped.add(key)
            raise CycleGuardTripped(
                f"{node_id}: {len(hist)} restores for {signature!r} within "
                f"{self.window_ms} ms")
        hist.append(t_ms)
        return len(hist)

    def tripped(self, node_id: str, signature: str) -> bool:
        return (node_id, signature) in self._tripped

    def reset(self, node_id: str, signature: str) -> None:
        self._tripped.discard((node_id, signature))
        self._history.pop((node_id, signature), None)


class RecoveryManager:
    """Snapshot/restore orchestration over registered stateful nodes.

    A node is any object with state_dict()/load_state_dict() (detectors,
    the risk accumulator, the scenario controller, the feature state).
    """

    def __init__(self, store: SnapshotStore | None = None,
                 health: HealthTracker | None = None,
                 guard: CycleGuard | None = None,
                 desk=None):
        self.store = store or SnapshotStore()
        self.health = health or HealthTracker()
        self.guard = guard or CycleGuard()
        self.desk = desk
        self.nodes: dict[str, object] = {}
        self.restore_log: list[RestoreReport] = []
        self.escalations: list[dict] = []

    def register(self, node_id: str, obj) -> None:
        self.nodes[node_id] = obj
        self.health.observe(node_id, 0)

    def on_anomaly_event(self, event) -> None:
        self.health.mark(f"det:{event.detector_id}", event.t_ms)

    def take_snapshot(self, node_id: str, now_ms: int) -> Snapshot:
        obj = self._node(node_id)
        if not self.health.healthy(node_id, now_ms):
            raise NodeUnhealthy(
                f"{node_id}: anomaly within the last "
                f"{self.health.window_ms} ms, snapshot refused")
        snap = Snapshot(
            node_id=node_id, t_ms=now_ms,
            state=copy.deepcopy(obj.state_dict()),
            healthy_window_ms=self.health.anomaly_free_ms(node_id, now_ms))
        return self.store.save(snap)

    def restore(self, node_id: str, fault_signature: str, now_ms: int,
                snapshot: Snapshot | None = None) -> RestoreReport:
        obj = self._node(node_id)
        snap = snapshot or self.store.latest(node_id)
        if snap is None:
            raise NoSnapshot(node_id)
        try:
            attempts = self.guard.record(node_id, fault_signature, now_ms)
        except CycleGuardTripped:
            self._escalate(node_id, fault_signature, now_ms)
            raise
        obj.load_state_dict(copy.deepcopy(snap.state))
        report = RestoreReport(
            node_id=node_id, snapshot_t_ms=snap.t_ms, restored_at_ms=now_ms,
            fault_signature=fault_signature, attempts_in_window=attempts)
        self.restore_log.append(report)
        return report

    def _escalate(self, node_id: str, signature: str, now_ms: int) -> None:
        detail = {"node": node_id, "fault_signature": signature, "t_ms": now_ms}
        self.escalations.append(detail)
        if self.desk is not None:
            self.desk.raise_escalation("cycle-guard", detail, now_ms)

    def _node(self, node_id: str):
        obj = self.nodes.get(node_id)
        if obj is None:
            raise NoSnapshot(f"unknown node {node_id!r}")
        return obj


# -- shadows -----------------------------------------------------------------


@dataclass(frozen=True)
class ShadowSpec:
    primary_id: str
    divisor: int = 2  # shadow sees every divisor-th input

    def __post_init__(self):
        if self.divisor < 2:
            raise ValueError("shadow rate divisor must be >= 2")


class ShadowedDetector:
    """A primary detector plus a decimated-rate shadow replica.

    The shadow consumes inputs 'd, 2d, 3d, ...' of the primary's stream.
    Promotion swaps the shadow in at the next input; the old primary is
    reset and becomes the new shadow ("shadowed and restarted").
    """

    def __init__(self, factory, spec: ShadowSpec):
        self._factory = factory
        self.spec = spec
        self.primary = factory()
        self.shadow = factory()
        self.inputs_seen = 0
        self.shadow_inputs = 0
        self.promotions = 0
        self.lineage: list[str] = []

    @property
    def shadow_warm(self) -> bool:
        return self.shadow_inputs >= 1

    def process(self, view):
        self.inputs_seen += 1
        if self.inputs_seen % self.spec.divisor == 0:
            self.shadow.process(view)
            self.shadow_inputs += 1
        self.lineage.append(f"primary-{self.promotions}")
        return self.primary.process(view)

    def promote(self) -> dict:
        if not self.shadow_warm:
            raise ShadowCold(f"{self.spec.primary_id}: shadow has no inputs yet")
        old = self.primary
        self.primary = self.shadow
        self.shadow = self._factory()  # old primary's duties restart fresh
        self.promotions += 1
        self.shadow_inputs = 0
        return {"promoted": self.spec.primary_id,
                "promotions": self.promotions,
                "old_primary_reset": True,
                "inputs_seen": self.inputs_seen}

    def compute_ratio(self) -> float:
        """Shadow work divided by primary work, exact by decimation."""
        if self.inputs_seen == 0:
            return 0.0
        return self.shadow_inputs / self.inputs_seen


# -- safe mode ----------------------------------------------------------------


@dataclass
class SafeModeReport:
    mode: str
    entered_at_ms: int | None
    reason: str | None
    already: bool = False


class SafeModeController:
    """full <-> safe state machine wired into the pipeline and the robot."""

    def __init__(self, pipeline=None, runner=None, safe_speed: float | None = None,
                 manager: RecoveryManager | None = None):
        self.pipeline = pipeline
        self.runner = runner
        self.safe_speed = safe_speed
        self.manager = manager
        self.mode = "full"
        self.entered_at_ms: int | None = None
        self.reason: str | None = None
        self.history: list[dict] = []

    def enter(self, t_ms: int, reason: str) -> SafeModeReport:
        if self.mode == "safe":
            return SafeModeReport(mode="safe", entered_at_ms=self.entered_at_ms,
                                  reason=self.reason, already=True)
        self.mode = "safe"
        self.entered_at_ms = t_ms
        self.reason = reason
        self.history.append({"t_ms": t_ms, "action": "enter", "reason": reason})
        if self.pipeline is not None:
            self.pipeline.pause_detectors()
        if self.runner is not None and self.safe_speed is not None:
            self.runner.enter_safe_mode(self.safe_speed)
        return SafeModeReport(mode="safe", entered_at_ms=t_ms, reason=reason)

    def exit(self, t_ms: int) -> SafeModeReport:
        if self.mode == "full":
            return SafeModeReport(mode="full", entered_at_ms=None, reason=None,
                                  already=True)
        self.mode = "full"
        self.history.append({"t_ms": t_ms, "action": "exit", "reason": None})
        if self.pipeline is not None:
            self.pipeline.resume_detectors()
            if self.pipeline.accumulator is not None:
                self.pipeline.accumulator.reset()
        if self.runner is not None:
            self.runner.exit_safe_mode()
        if self.manager is not None:
            # warm-restart registered nodes from their last known-good state
            for node_id in self.manager.nodes:
                snap = self.manager.store.latest(node_id)
                if snap is not None:
                    self.manager.nodes[node_id].load_state_dict(
                        copy.deepcopy(snap.state))
        self.entered_at_ms = None
        self.reason = None
        return SafeModeReport(mode="full", entered_at_ms=None, reason=None)
