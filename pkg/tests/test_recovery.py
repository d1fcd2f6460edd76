import json

import pytest

from buswatch.alarmdesk import AlarmDesk
from buswatch.detectors import AnomalyEvent, DetectorConfig, ExtremeDetector
from buswatch.envelope import Envelope, EnvelopeDim, RiskAccumulator, RiskModel
from buswatch.errors import CycleGuardTripped, NodeUnhealthy, NoSnapshot, ShadowCold
from buswatch.recovery import (
    CycleGuard,
    HealthTracker,
    RecoveryManager,
    SafeModeController,
    ShadowSpec,
    ShadowedDetector,
    SnapshotStore,
)


def extreme_detector(det_id="e1"):
    return ExtremeDetector(DetectorConfig(
        id=det_id, kind="extreme", target="rate:/a", t=3.0,
        baseline_window_count=4))


def view(rate, k):
    from buswatch.detectors import FrameView
    from buswatch.features import PartialAggregate, Window, finalize

    p = PartialAggregate(Window(k * 1000, (k + 1) * 1000))
    for i in range(rate):
        p.add("/a", k * 1000 + i * (1000 // max(rate, 1)))
    return FrameView(finalize(p))


class TestHealthTracker:
    def test_healthy_until_marked(self):
        h = HealthTracker(window_ms=5000)
        assert h.healthy("n", 0)
        h.mark("n", 10_000)
        assert not h.healthy("n", 12_000)
        assert h.healthy("n", 15_000)

    def test_anomaly_free_span(self):
        h = HealthTracker()
        h.observe("n", 0)
        assert h.anomaly_free_ms("n", 8000) == 8000
        h.mark("n", 5000)
        assert h.anomaly_free_ms("n", 8000) == 3000


class TestSnapshotRestore:
    def test_snapshot_restores_baseline_exactly(self, tmp_path):
        mgr = RecoveryManager(store=SnapshotStore(tmp_path / "snap"))
        det = extreme_detector()
        mgr.register("det:e1", det)
        for k in range(6):
            det.process(view(10 + k % 2, k))
        snap = mgr.take_snapshot("det:e1", now_ms=6000)
        before = det.state_dict()

        for k in range(6, 12):
            det.process(view(30, k))  # drift the state
        assert det.state_dict() != before

        mgr.restore("det:e1", "unit-test", now_ms=13_000)
        assert det.state_dict() == before

    def test_snapshot_files_versioned_on_disk(self, tmp_path):
        mgr = RecoveryManager(store=SnapshotStore(tmp_path / "snap"))
        det = extreme_detector()
        mgr.register("det:e1", det)
        mgr.take_snapshot("det:e1", now_ms=1000)
        mgr.take_snapshot("det:e1", now_ms=2000)
        files = sorted((tmp_path / "snap" / "det:e1".replace("/", "_")).glob("*.json"))
        assert [f.name for f in files] == ["1000.json", "2000.json"]
        blob = json.loads(files[0].read_text(encoding="utf-8"))
        assert blob["node_id"] == "det:e1"

    def test_unhealthy_node_refused(self):
        mgr = RecoveryManager()
        det = extreme_detector()
        mgr.register("det:e1", det)
        mgr.health.mark("det:e1", 10_000)
        with pytest.raises(NodeUnhealthy):
            mgr.take_snapshot("det:e1", now_ms=12_000)  # anomaly 2 s ago, window 5 s
        mgr.take_snapshot("det:e1", now_ms=16_000)

    def test_restore_without_snapshot(self):
        mgr = RecoveryManager()
        mgr.register("det:e1", extreme_detector())
        with pytest.raises(NoSnapshot):
            mgr.restore("det:e1", "sig", now_ms=0)

    def test_envelope_accumulator_round_trip(self):
        env = Envelope([EnvelopeDim("speed", "m/s", 0, 1, 0, 1.5, 0, 3)])
        acc = RiskAccumulator(env, RiskModel(cutoff=100))
        for k in range(5):
            acc.update((2.0,), dt_ms=100, t_ms=(k + 1) * 100)
        mgr = RecoveryManager()
        mgr.register("envelope", acc)
        snap = mgr.take_snapshot("envelope", now_ms=1000)
        level_before = acc.level
        acc.update((2.5,), dt_ms=100, t_ms=2000)
        mgr.restore("envelope", "sig", now_ms=3000)
        assert acc.level == level_before


class TestCycleGuard:
    def test_allows_k_max_then_trips_once(self):
        guard = CycleGuard(k_max=3, window_ms=60_000)
        for k in range(3):
            guard.record("n", "sig", k * 1000)
        with pytest.raises(CycleGuardTripped):
            guard.record("n", "sig", 5000)
        assert guard.tripped("n", "sig")

    def test_attempts_outside_window_expire(self):
        guard = CycleGuard(k_max=2, window_ms=10_000)
        guard.record("n", "sig", 0)
        guard.record("n", "sig", 1000)
        guard.record("n", "sig", 20_000)  # both earlier attempts expired

    def test_distinct_signatures_independent(self):
        guard = CycleGuard(k_max=1, window_ms=60_000)
        guard.record("n", "sig-a", 0)
        guard.record("n", "sig-b", 0)

    def test_persistent_fault_scenario(self):
        # deterministic fault: restore never helps; expect <= k_max restores
        # per window and exactly one escalation
        desk = AlarmDesk()
        mgr = RecoveryManager(desk=desk)
        det = extreme_detector()
        mgr.register("det:e1", det)
        for k in range(6):
            det.process(view(10, k))
        mgr.take_snapshot("det:e1", now_ms=6000)

        restores = 0
        escalations = 0
        for attempt in range(10):
            t = 7000 + attempt * 2000
            try:
                mgr.restore("det:e1", "node=det:e1|kind=extreme", now_ms=t)
                restores += 1
            except CycleGuardTripped:
                escalations = len(mgr.escalations)
                break
        assert restores == 3
        assert escalations == 1
        escalated = [a for a in desk.list_alarms() if a.state == "escalated"]
        assert len(escalated) == 1
        assert escalated[0].severity == "critical"

        # guard now latched: further attempts refuse without a second escalation
        with pytest.raises(CycleGuardTripped):
            mgr.restore("det:e1", "node=det:e1|kind=extreme", now_ms=60_000)
        assert len(mgr.escalations) == 2  # logged, but desk alarm count stays 2


class TestShadow:
    def test_decimation_pattern(self):
        shadowed = ShadowedDetector(lambda: extreme_detector(),
                                    ShadowSpec("det:e1", divisor=2))
        for k in range(10):
            shadowed.process(view(10, k))
        assert shadowed.inputs_seen == 10
        assert shadowed.shadow_inputs == 5  # inputs 2,4,6,8,10

    def test_promote_cold_shadow_refused(self):
        shadowed = ShadowedDetector(lambda: extreme_detector(),
                                    ShadowSpec("det:e1", divisor=4))
        with pytest.raises(ShadowCold):
            shadowed.promote()

    def test_promotion_swaps_and_continues_within_one_window(self):
        shadowed = ShadowedDetector(lambda: extreme_detector("shadowed"),
                                    ShadowSpec("det:shadowed", divisor=4))
        for k in range(20):
            shadowed.process(view(10 + k % 2, k))
        poisoned = shadowed.primary
        poisoned.baseline.values.clear()  # simulate a poisoned primary
        warm_shadow = shadowed.shadow
        report = shadowed.promote()
        assert report["old_primary_reset"]
        assert shadowed.primary is warm_shadow
        # next frame is processed by the promoted node: gap <= 1 window
        out = shadowed.process(view(10, 20))
        assert shadowed.lineage[-1] == "primary-1"
        assert shadowed.primary.frames_seen > 0

    def test_compute_ratio_bounded_by_divisor(self):
        shadowed = ShadowedDetector(lambda: extreme_detector(),
                                    ShadowSpec("det:e1", divisor=4))
        for k in range(40):
            shadowed.process(view(10, k))
        assert shadowed.compute_ratio() <= 1 / 4 + 1e-9


class TestSafeModeController:
    def test_enter_exit_cycle(self):
        ctl = SafeModeController()
        r1 = ctl.enter(1000, reason="estop")
        assert r1.mode == "safe" and not r1.already
        r2 = ctl.enter(2000, reason="estop")
        assert r2.already  # idempotent second entry reports the conflict
        r3 = ctl.exit(3000)
        assert r3.mode == "full"
        assert ctl.history[0]["action"] == "enter"

    def test_exit_warm_restarts_from_snapshot(self):
        mgr = RecoveryManager()
        det = extreme_detector()
        mgr.register("det:e1", det)
        for k in range(6):
            det.process(view(10, k))
        mgr.take_snapshot("det:e1", now_ms=6000)
        good = det.state_dict()
        for k in range(6, 10):
            det.process(view(25, k))
        ctl = SafeModeController(manager=mgr)
        ctl.enter(10_000, reason="operator")
        ctl.exit(12_000)
        assert det.state_dict() == good
