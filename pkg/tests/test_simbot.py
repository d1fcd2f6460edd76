import hashlib
import math

import pytest

from buswatch.capture import read_trace, start_capture
from buswatch.errors import InvalidScenario, ScenarioNotRunning, TopicCollision
from buswatch.msgbus import Bus
from buswatch.simbot import (
    Injection,
    Scenario,
    ScenarioRunner,
    circle_path,
    figure8_path,
    rounded_square_path,
    run_scenario,
)


def base_scenario(duration_ms=60000, injections=None, seed=42):
    return Scenario(
        path=circle_path(radius=3.0, points=24),
        nominal_speed=0.5,
        duration_ms=duration_ms,
        tick_ms=50,
        seed=seed,
        injections=injections or [],
    )


def trace_hash(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestScenarioValidation:
    def test_duration_must_align_with_tick(self):
        with pytest.raises(InvalidScenario):
            Scenario(path=[(0, 0), (1, 0)], nominal_speed=0.5,
                     duration_ms=1001, tick_ms=50, seed=1).validate()

    def test_two_waypoints_minimum(self):
        with pytest.raises(InvalidScenario):
            Scenario(path=[(0, 0)], nominal_speed=0.5,
                     duration_ms=1000, tick_ms=50, seed=1).validate()

    def test_injection_window_inside_duration(self):
        with pytest.raises(InvalidScenario):
            base_scenario(duration_ms=10000, injections=[
                Injection("jerky_direction", 5000, 15000)]).validate()

    def test_yaml_round_trip(self, tmp_path):
        doc = {
            "path": [[0, 0], [2, 0], [2, 2]],
            "nominal_speed": 0.4,
            "duration_ms": 5000,
            "tick_ms": 50,
            "seed": 7,
            "injections": [
                {"kind": "varying_speed", "start_ms": 1000, "end_ms": 2000,
                 "magnitude": 0.4}],
        }
        import yaml

        p = tmp_path / "s.yaml"
        p.write_text(yaml.safe_dump(doc), encoding="utf-8")
        sc = Scenario.from_yaml(p)
        assert sc.injections[0].kind == "varying_speed"
        assert sc.path[2] == (2.0, 2.0)


class TestNominalRates:
    def test_cmd_vel_exact_count(self):
        bus = Bus()
        report = run_scenario(base_scenario(), bus)
        assert report.messages_published["/cmd_vel"] == 1200  # 20 Hz x 60 s

    def test_all_topics_within_one_of_nominal(self):
        bus = Bus()
        report = run_scenario(base_scenario(duration_ms=30000), bus)
        expected = {"/cmd_vel": 600, "/odom": 600, "/scan_summary": 300,
                    "/battery": 30, "/sys/cpu/teleop": 60, "/sys/cpu/base": 60,
                    "/sys/cpu/lidar": 60, "/sys/cpu/nav": 60}
        for topic, want in expected.items():
            assert abs(report.messages_published[topic] - want) <= 1, topic

    def test_no_rejections_on_nominal_run(self):
        bus = Bus()
        report = run_scenario(base_scenario(duration_ms=30000), bus)
        assert report.rejected == {}

    def test_topic_collision(self):
        bus = Bus()
        ScenarioRunner(base_scenario(duration_ms=1000), bus)
        with pytest.raises(TopicCollision):
            ScenarioRunner(base_scenario(duration_ms=1000), bus)


class TestDeterminism:
    @pytest.mark.parametrize("path_fn", [circle_path, figure8_path, rounded_square_path])
    def test_same_seed_identical_trace(self, tmp_path, path_fn):
        hashes = []
        for run in range(2):
            bus = Bus()
            sc = Scenario(path=path_fn(), nominal_speed=0.5, duration_ms=10000,
                          tick_ms=50, seed=99,
                          injections=[Injection("varying_speed", 3000, 6000, 0.5)])
            out = tmp_path / f"r{run}_{path_fn.__name__}.trace.jsonl"
            session = start_capture(bus, out)
            run_scenario(sc, bus)
            session.stop()
            hashes.append(trace_hash(out))
        assert hashes[0] == hashes[1]

    def test_different_seed_differs(self, tmp_path):
        hashes = []
        for seed in (1, 2):
            bus = Bus()
            out = tmp_path / f"s{seed}.trace.jsonl"
            session = start_capture(bus, out)
            run_scenario(base_scenario(duration_ms=5000, seed=seed), bus)
            session.stop()
            hashes.append(trace_hash(out))
        assert hashes[0] != hashes[1]


class TestInjections:
    def test_disconnect_silences_cmd_vel_only(self, tmp_path):
        bus = Bus()
        sc = base_scenario(duration_ms=30000, injections=[
            Injection("controller_disconnect", 10000, 15000)])
        out = tmp_path / "d.trace.jsonl"
        session = start_capture(bus, out)
        run_scenario(sc, bus)
        session.stop()
        records = read_trace(out)
        in_gap = [r for r in records if 10000 <= r.t_ms < 15000]
        assert not any(r.topic == "/cmd_vel" for r in in_gap)
        assert sum(1 for r in in_gap if r.topic == "/odom") == 100  # unaffected
        gap_scans = sum(1 for r in in_gap if r.topic == "/scan_summary")
        assert gap_scans == 50

    def test_jerky_alternates_sign_at_magnitude(self, tmp_path):
        bus = Bus()
        sc = base_scenario(duration_ms=20000, injections=[
            Injection("jerky_direction", 10000, 13000, 1.5)])
        out = tmp_path / "j.trace.jsonl"
        session = start_capture(bus, out)
        run_scenario(sc, bus)
        session.stop()
        cmds = [r for r in read_trace(out)
                if r.topic == "/cmd_vel" and 10000 <= r.t_ms < 13000]
        signs = [math.copysign(1, r.payload["angular"]) for r in cmds]
        assert all(signs[i] != signs[i + 1] for i in range(len(signs) - 1))
        assert all(abs(abs(r.payload["angular"]) - 1.5) < 0.2 for r in cmds)

    def test_splash_pins_scan_out_of_range(self, tmp_path):
        bus = Bus()
        sc = base_scenario(duration_ms=20000, injections=[
            Injection("sensor_splash", 10000, 12000, 2.0)])
        out = tmp_path / "s.trace.jsonl"
        session = start_capture(bus, out)
        report = run_scenario(sc, bus)
        session.stop()
        splash_records = [r for r in read_trace(out)
                          if r.topic == "/scan_summary" and 10000 <= r.t_ms < 12000]
        assert splash_records
        assert all(r.validity == "rejected_range" for r in splash_records)
        assert all(r.payload["range_mean"] == 15.0 for r in splash_records)
        assert report.rejected["/scan_summary"] == len(splash_records)

    def test_splash_labeled_not_expected(self):
        sc = base_scenario(duration_ms=20000, injections=[
            Injection("sensor_splash", 10000, 12000)])
        label = sc.labels()[0]
        assert label.expected_detection is False

    def test_varying_speed_changes_factor(self, tmp_path):
        bus = Bus()
        sc = base_scenario(duration_ms=30000, injections=[
            Injection("varying_speed", 10000, 20000, 0.5)])
        out = tmp_path / "v.trace.jsonl"
        session = start_capture(bus, out)
        run_scenario(sc, bus)
        session.stop()
        odom = [r for r in read_trace(out) if r.topic == "/odom"]
        # steady state only: the startup turn ramps speed from zero
        nominal_speeds = [abs(r.payload["speed"]) for r in odom
                          if 5000 <= r.t_ms < 9000]
        injected_speeds = [abs(r.payload["speed"]) for r in odom
                           if 10500 <= r.t_ms < 20000]
        spread_nominal = max(nominal_speeds) - min(nominal_speeds)
        spread_injected = max(injected_speeds) - min(injected_speeds)
        assert spread_injected > 3 * max(spread_nominal, 0.01)


class TestLiveInjection:
    def test_inject_live_requires_running(self):
        runner = ScenarioRunner(base_scenario(duration_ms=2000), Bus())
        with pytest.raises(ScenarioNotRunning):
            runner.inject_live("jerky_direction", 1.5, 1000)

    def test_live_injection_applies_and_labels(self):
        runner = ScenarioRunner(base_scenario(duration_ms=10000), Bus())
        fired = {}

        def hook(t_ms):
            if t_ms == 2000:
                fired["id"] = runner.inject_live("jerky_direction", 1.5, 3000)

        runner.run(tick_hook=hook)
        assert fired["id"] == "inj-1"
        live = [l for l in runner.labels if l.start_ms >= 2000]
        assert live and live[0].kind == "jerky_direction"
        assert live[0].end_ms - live[0].start_ms == 3000

    def test_zero_duration_rejected(self):
        runner = ScenarioRunner(base_scenario(duration_ms=2000), Bus())
        runner.running = True
        with pytest.raises(InvalidScenario):
            runner.inject_live("jerky_direction", 1.5, 0)


class TestSafeMode:
    def test_speed_clamped_in_safe_mode(self, tmp_path):
        bus = Bus()
        runner = ScenarioRunner(base_scenario(duration_ms=10000), bus)
        out = tmp_path / "sm.trace.jsonl"
        session = start_capture(bus, out)

        def hook(t_ms):
            if t_ms == 5000:
                runner.enter_safe_mode(speed_limit=0.2)

        runner.run(tick_hook=hook)
        session.stop()
        cmds = [r for r in read_trace(out) if r.topic == "/cmd_vel"]
        after = [r.payload["linear"] for r in cmds if r.t_ms > 5000]
        assert after and all(v <= 0.2 + 1e-9 for v in after)

    def test_state_dict_round_trip(self):
        runner = ScenarioRunner(base_scenario(duration_ms=2000), Bus())
        runner.run()
        blob = runner.state_dict()
        other = ScenarioRunner(base_scenario(duration_ms=2000), Bus())
        other.load_state_dict(blob)
        assert other.state_dict() == blob
