import json
import random

import pytest

from buswatch.alarmdesk import (
    Alarm,
    AlarmDesk,
    AlarmPolicy,
    AlarmSignature,
    SuppressionModel,
)
from buswatch.detectors import AnomalyEvent, AssumptionChange
from buswatch.envelope import EStopDecision
from buswatch.errors import AlreadyResolved, UnknownAlarm


def anomaly(t_ms, detector="det-1", target="rate:/odom", kind="extreme", score=4.0):
    return AnomalyEvent(t_ms=t_ms, detector_id=detector, target=target,
                        score=score, kind=kind, evidence={})


def estop(t_ms=0):
    return EStopDecision(t_ms=t_ms, accumulated_risk=3.0, triggering_rule="integral",
                         contributing_dims={"speed": 0.5}, excursion_count=1)


class TestRateThreshold:
    def test_third_raise_in_window_presents(self):
        desk = AlarmDesk(AlarmPolicy(window_ms=10_000, persist_threshold=3))
        assert desk.ingest_event(anomaly(1000)) is None
        assert desk.ingest_event(anomaly(2000)) is None
        presented = desk.ingest_event(anomaly(3000))
        assert presented is not None and presented.state == "presented"

    def test_raises_outside_window_do_not_count(self):
        desk = AlarmDesk(AlarmPolicy(window_ms=5_000, persist_threshold=2))
        assert desk.ingest_event(anomaly(0)) is None
        assert desk.ingest_event(anomaly(6000)) is None  # first expired
        assert desk.ingest_event(anomaly(7000)) is not None

    def test_subthreshold_raises_logged_not_lost(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=5))
        desk.ingest_event(anomaly(0))
        alarms = desk.list_alarms()
        assert len(alarms) == 1
        assert alarms[0].state == "raised"
        assert alarms[0].reason == "below_rate_threshold"


class TestSuppression:
    def test_four_dismissals_suppress_posterior_oracle(self):
        # Beta(1,1): after 4 dismissals the posterior mean is 5/6 > 0.8
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        for k in range(4):
            alarm = desk.ingest_event(anomaly(k * 1000))
            desk.feedback(alarm.id, "dismiss")
        sig = AlarmSignature("det-1", "rate:/odom", "extreme")
        # direct-formula oracle (1+4)/(2+4) = 5/6; a few seconds of count
        # decay between feedbacks shifts it by < 1e-4
        assert desk.model.posterior_mean(sig, 3000) == pytest.approx(5 / 6, rel=1e-3)
        assert desk.model.posterior_mean(sig, 3000) > 0.8
        held = desk.ingest_event(anomaly(5000))
        assert held is None
        assert desk.list_alarms("suppressed")[-1].reason == "learned_suppression"

    def test_confirm_unsuppresses_and_resets(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        for k in range(4):
            alarm = desk.ingest_event(anomaly(k * 1000))
            desk.feedback(alarm.id, "dismiss")
        assert desk.ingest_event(anomaly(5000)) is None  # suppressed
        suppressed = desk.list_alarms("suppressed")[-1]
        desk.feedback(suppressed.id, "confirm", t_ms=6000)
        nxt = desk.ingest_event(anomaly(7000))
        assert nxt is not None and nxt.state == "presented"

    def test_confirm_blocks_future_suppression(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        first = desk.ingest_event(anomaly(0))
        desk.feedback(first.id, "confirm")
        for k in range(1, 10):
            alarm = desk.ingest_event(anomaly(k * 1000))
            assert alarm is not None  # beta > 0 keeps it un-suppressible
            desk.feedback(alarm.id, "dismiss")

    def test_counts_decay_with_half_life(self):
        model = SuppressionModel(cutoff=0.8, min_evidence=4, half_life_ms=3_600_000)
        sig = AlarmSignature("d", "t", "extreme")
        for k in range(4):
            model.record_dismiss(sig, k)
        assert model.suppresses(sig, 1000)
        # two half-lives later the evidence has decayed below n_min
        assert not model.suppresses(sig, 2 * 3_600_000 + 1000)

    def test_estop_never_suppressed(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=5))
        sig = AlarmSignature("envelope", "estop", "estop")
        for k in range(10):
            desk.model.record_dismiss(sig, k)
        alarm = desk.ingest_event(estop(t_ms=100))
        assert alarm is not None and alarm.state == "presented"
        assert alarm.severity == "critical"

    def test_estop_presented_under_randomized_suppression_states(self):
        rng = random.Random(77)
        for _ in range(200):
            desk = AlarmDesk(AlarmPolicy(persist_threshold=rng.randrange(1, 6)))
            sig = AlarmSignature("envelope", "estop", "estop")
            for _ in range(rng.randrange(0, 20)):
                if rng.random() < 0.8:
                    desk.model.record_dismiss(sig, rng.randrange(0, 10_000))
                else:
                    desk.model.record_confirm(sig, rng.randrange(0, 10_000))
            alarm = desk.ingest_event(estop(t_ms=20_000))
            assert alarm is not None and alarm.state == "presented"


class TestFeedback:
    def test_unknown_alarm(self):
        desk = AlarmDesk()
        with pytest.raises(UnknownAlarm):
            desk.feedback("a-999999", "dismiss")

    def test_already_resolved(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        alarm = desk.ingest_event(anomaly(0))
        desk.feedback(alarm.id, "dismiss")
        with pytest.raises(AlreadyResolved):
            desk.feedback(alarm.id, "dismiss")

    def test_transitions_timestamped(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        alarm = desk.ingest_event(anomaly(500))
        desk.feedback(alarm.id, "confirm", t_ms=900)
        states = [t["state"] for t in alarm.transitions]
        assert states == ["raised", "presented", "confirmed"]
        assert alarm.transitions[-1]["t_ms"] == 900


class TestDynamicThreshold:
    def test_formula(self):
        desk = AlarmDesk(AlarmPolicy(dynamic_threshold=True, dynamic_c=0.5,
                                     h_min=1, h_max=4))
        sig = AlarmSignature("d", "t", "extreme")
        assert desk.adapt_threshold(sig, 10) == 4  # 5 clamped to h_max
        assert desk.adapt_threshold(sig, 4) == 2
        assert desk.adapt_threshold(sig, 0) == 1  # h_min

    def test_threshold_tracks_rate_step(self):
        desk = AlarmDesk(AlarmPolicy(window_ms=10_000, dynamic_threshold=True,
                                     dynamic_c=0.5, h_min=1, h_max=10))
        sig = AlarmSignature("det-1", "rate:/odom", "extreme")
        for k in range(4):
            desk.ingest_event(anomaly(k * 2000))  # ~2 raises per window
        h_low = desk._dynamic_h[sig.key()]
        for k in range(20):
            desk.ingest_event(anomaly(20_000 + k * 500))  # 20 raises per window
        h_high = desk._dynamic_h[sig.key()]
        assert h_high > h_low


class TestLifecycleAndLog:
    def test_assumption_changes_skip_rate_threshold(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=5))
        change = AssumptionChange(t_ms=100, name="teleop-active",
                                  old_value=True, new_value=False)
        alarm = desk.ingest_event(change)
        assert alarm is not None and alarm.severity == "info"

    def test_escalation_enters_escalated_state(self):
        desk = AlarmDesk()
        alarm = desk.raise_escalation("cycle-guard", {"node": "det-1"}, t_ms=50)
        assert alarm.state == "escalated"
        assert alarm.severity == "critical"

    def test_every_raise_in_log_with_final_state(self):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=2))
        desk.ingest_event(anomaly(0))       # below threshold
        desk.ingest_event(anomaly(1000))    # presented
        lines = [json.loads(l) for l in desk.log_lines()]
        ids = {l["alarm_id"] for l in lines}
        assert len(ids) == 2
        final = {l["alarm_id"]: l["state"] for l in lines}
        assert set(final.values()) == {"raised", "presented"}

    def test_suppression_monotonic_under_dismissals(self):
        # with only dismissals arriving, presented count per window never grows
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        per_window = []
        for window in range(8):
            presented = 0
            for k in range(5):
                alarm = desk.ingest_event(anomaly(window * 5000 + k * 1000))
                if alarm is not None:
                    presented += 1
                    desk.feedback(alarm.id, "dismiss")
            per_window.append(presented)
        assert all(a >= b for a, b in zip(per_window, per_window[1:]))
        assert per_window[-1] == 0

    def test_log_file_written(self, tmp_path):
        desk = AlarmDesk(AlarmPolicy(persist_threshold=1))
        desk.ingest_event(anomaly(0))
        path = tmp_path / "run.alarms.jsonl"
        desk.write_log(path)
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        assert len(lines) == 2  # raised + presented transitions
