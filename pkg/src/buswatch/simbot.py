"""Deterministic scenario simulator: a differential-drive robot on a bus.

A unicycle-model robot follows a scripted waypoint path, publishing command
and telemetry topics at fixed nominal rates on a simulated millisecond
clock. Everything is driven by one seeded RNG consumed in a fixed order per
tick, so a (scenario, seed) pair fully determines every published message.

Anomaly injectors perturb the streams over declared intervals and each one
contributes a ground-truth label for scoring:

* jerky_direction      command angular velocity alternates sign at
                       +/-magnitude every command tick.
* controller_disconnect  command messages stop entirely; the base holds its
                       last command, other topics are untouched.
* counterintuitive_path  waypoints are visited in a seeded-shuffled order,
                       retargeting every couple of seconds.
* varying_speed        commanded speed is scaled by a random factor in
                       [1-m, 1+m], redrawn every 500 ms.
* sensor_splash        the range sensor reports values pinned above its
                       schema range (invalid data, not an anomaly: labeled
                       expected_detection=false).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import InvalidScenario, ScenarioNotRunning, TopicCollision
from .msgbus import Bus, schema

INJECTION_KINDS = (
    "jerky_direction",
    "controller_disconnect",
    "counterintuitive_path",
    "varying_speed",
    "sensor_splash",
)

# Topics an injection of each kind may perturb (used for alarm matching).
PERTURBED_TOPICS = {
    "jerky_direction": ("/cmd_vel", "/odom"),
    "controller_disconnect": ("/cmd_vel",),
    "counterintuitive_path": ("/cmd_vel", "/odom"),
    "varying_speed": ("/cmd_vel", "/odom"),
    "sensor_splash": ("/scan_summary",),
}

DEFAULT_MAGNITUDE = {
    "jerky_direction": 1.5,     # rad/s amplitude of the alternating command
    "controller_disconnect": 0.0,
    "counterintuitive_path": 1.0,
    "varying_speed": 0.5,       # +/- fraction of nominal speed
    "sensor_splash": 2.0,       # metres above the schema ceiling
}

CPU_NODES = ("teleop", "base", "lidar", "nav")
SCAN_CEILING = 13.0
SPEED_RESAMPLE_MS = 500
RETARGET_MS = 2000
WAYPOINT_TOLERANCE = 0.15
HEADING_GAIN = 4.0
STEER_SLEW_PER_TICK = 0.35


@dataclass(frozen=True)
class Injection:
    kind: str
    start_ms: int
    end_ms: int
    magnitude: float | None = None

    def resolved_magnitude(self) -> float:
        if self.magnitude is None:
            return DEFAULT_MAGNITUDE[self.kind]
        return self.magnitude

    def active(self, t_ms: int) -> bool:
        return self.start_ms <= t_ms < self.end_ms


@dataclass(frozen=True)
class GroundTruthLabel:
    start_ms: int
    end_ms: int
    kind: str
    expected_detection: bool

    def to_json(self) -> dict:
        return {"start_ms": self.start_ms, "end_ms": self.end_ms,
                "kind": self.kind, "expected_detection": self.expected_detection}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruthLabel":
        return cls(start_ms=obj["start_ms"], end_ms=obj["end_ms"],
                   kind=obj["kind"], expected_detection=obj["expected_detection"])


@dataclass
class Scenario:
    path: list
    nominal_speed: float
    duration_ms: int
    tick_ms: int
    seed: int
    injections: list = field(default_factory=list)

    def validate(self) -> None:
        if self.tick_ms < 1:
            raise InvalidScenario("tick_ms must be >= 1")
        if self.duration_ms <= 0 or self.duration_ms % self.tick_ms != 0:
            raise InvalidScenario("duration_ms must be a positive multiple of tick_ms")
        if len(self.path) < 2:
            raise InvalidScenario("path needs at least 2 waypoints")
        if self.nominal_speed <= 0:
            raise InvalidScenario("nominal_speed must be positive")
        for inj in self.injections:
            if inj.kind not in INJECTION_KINDS:
                raise InvalidScenario(f"unknown injection kind {inj.kind!r}")
            if not (0 <= inj.start_ms < inj.end_ms <= self.duration_ms):
                raise InvalidScenario(
                    f"injection {inj.kind} window [{inj.start_ms}, {inj.end_ms}) "
                    f"must fall inside [0, {self.duration_ms}]")

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        injections = [
            Injection(kind=i["kind"], start_ms=int(i["start_ms"]),
                      end_ms=int(i["end_ms"]),
                      magnitude=(float(i["magnitude"]) if "magnitude" in i else None))
            for i in doc.get("injections", [])
        ]
        sc = cls(
            path=[(float(p[0]), float(p[1])) for p in doc["path"]],
            nominal_speed=float(doc["nominal_speed"]),
            duration_ms=int(doc["duration_ms"]),
            tick_ms=int(doc["tick_ms"]),
            seed=int(doc["seed"]),
            injections=injections,
        )
        sc.validate()
        return sc

    @classmethod
    def from_yaml(cls, path) -> "Scenario":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(doc)

    def labels(self) -> list[GroundTruthLabel]:
        return [
            GroundTruthLabel(
                start_ms=i.start_ms, end_ms=i.end_ms, kind=i.kind,
                expected_detection=(i.kind != "sensor_splash"))
            for i in self.injections
        ]


def scenario_schemas() -> list:
    return [
        schema("/cmd_vel", {"linear": ("float", -3.0, 3.0),
                            "angular": ("float", -math.pi, math.pi)}),
        schema("/odom", {"x": ("float", -1000.0, 1000.0),
                         "y": ("float", -1000.0, 1000.0),
                         "heading": ("float", -math.pi, math.pi),
                         "speed": ("float", -5.0, 5.0)}),
        schema("/battery", {"voltage": ("float", 10.0, 13.0),
                            "charge": ("float", 0.0, 1.0)}),
        schema("/scan_summary", {"range_min": ("float", 0.0, SCAN_CEILING),
                                 "range_mean": ("float", 0.0, SCAN_CEILING)}),
    ] + [schema(f"/sys/cpu/{node}", {"load": ("float", 0.0, 1.0)})
         for node in CPU_NODES]


@dataclass
class ScenarioReport:
    messages_published: dict
    rejected: dict
    labels: list
    ticks: int
    duration_ms: int


def _wrap_angle(a: float) -> float:
    while a > math.pi:
        a -= 2 * math.pi
    while a < -math.pi:
        a += 2 * math.pi
    return a


class ScenarioRunner:
    """Drives the simulated clock, the robot, and the injectors.

    Call run() for a whole scenario, or step repeatedly via tick() when the
    loop is owned by a harness. Live injections are queued asynchronously
    and take effect at the next tick boundary.
    """

    def __init__(self, scenario: Scenario, bus: Bus):
        scenario.validate()
        self.scenario = scenario
        self.bus = bus
        self._rng = random.Random(scenario.seed)
        self._handles = {}
        self._register(bus)

        self.x, self.y = scenario.path[0]
        self.heading = 0.0
        self.waypoint_idx = 1
        self.cmd_linear = 0.0
        self.cmd_angular = 0.0
        self.speed_factor = 1.0
        self._jerk_sign = 1.0
        self._shuffled_order: list[int] | None = None
        self._retarget_at = 0
        self._last_steer = 0.0
        self._was_disconnected = False

        self.injections: list[Injection] = list(scenario.injections)
        self.labels: list[GroundTruthLabel] = scenario.labels()
        self._live_queue: list[Injection] = []
        self._injection_ids = 0

        self.safe_mode = False
        self.safe_speed_limit: float | None = None
        self.running = False
        self.now_ms = 0
        self.published: dict[str, int] = {}
        self.rejected_counts: dict[str, int] = {}

        cpu_period = max(1, 500 // scenario.tick_ms)
        scan_period = max(1, 100 // scenario.tick_ms)
        battery_period = max(1, 1000 // scenario.tick_ms)
        self._periods = {"/cmd_vel": 1, "/odom": 1, "/scan_summary": scan_period,
                         "/battery": battery_period}
        for node in CPU_NODES:
            self._periods[f"/sys/cpu/{node}"] = cpu_period
        self._cpu_base = {"teleop": 0.15, "base": 0.35, "lidar": 0.30, "nav": 0.40}

    def _register(self, bus: Bus) -> None:
        for name, tags in (("teleop", ("controller", "cpu-reporting")),
                           ("base", ("actuator", "cpu-reporting")),
                           ("lidar", ("sensor", "cpu-reporting")),
                           ("nav", ("planner", "cpu-reporting")),
                           ("sysmon", ("monitor",))):
            bus.register_node(name, tags=tags)
        publishers = {"/cmd_vel": "teleop", "/odom": "base", "/battery": "base",
                      "/scan_summary": "lidar"}
        for sc in scenario_schemas():
            if bus.has_topic(sc.name):
                raise TopicCollision(sc.name)
            pub = publishers.get(sc.name, "sysmon")
            self._handles[sc.name] = bus.create_topic(sc, publisher=pub)
        bus.subscribe("base", "/cmd_vel")
        bus.subscribe("nav", "/odom")
        bus.subscribe("nav", "/scan_summary")

    # -- injections ---------------------------------------------------------

    def inject_live(self, kind: str, magnitude: float | None = None,
                    duration_ms: int = 0) -> str:
        if not self.running:
            raise ScenarioNotRunning("no scenario tick in progress")
        if duration_ms <= 0:
            raise InvalidScenario("live injection needs a positive duration")
        if kind not in INJECTION_KINDS:
            raise InvalidScenario(f"unknown injection kind {kind!r}")
        self._injection_ids += 1
        inj_id = f"inj-{self._injection_ids}"
        self._live_queue.append(Injection(
            kind=kind, start_ms=-1, end_ms=duration_ms, magnitude=magnitude))
        return inj_id

    def _activate_live(self, t_ms: int) -> None:
        for pending in self._live_queue:
            start = t_ms
            end = min(t_ms + pending.end_ms, self.scenario.duration_ms)
            if end <= start:
                continue
            inj = Injection(kind=pending.kind, start_ms=start, end_ms=end,
                            magnitude=pending.magnitude)
            self.injections.append(inj)
            self.labels.append(GroundTruthLabel(
                start_ms=start, end_ms=end, kind=inj.kind,
                expected_detection=(inj.kind != "sensor_splash")))
        self._live_queue.clear()

    def _active(self, kind: str, t_ms: int) -> Injection | None:
        for inj in self.injections:
            if inj.kind == kind and inj.active(t_ms):
                return inj
        return None

    # -- safe mode ------------------------------------------------------------

    def enter_safe_mode(self, speed_limit: float) -> None:
        self.safe_mode = True
        self.safe_speed_limit = speed_limit

    def exit_safe_mode(self) -> None:
        self.safe_mode = False
        self.safe_speed_limit = None

    # -- controller -----------------------------------------------------------

    def _nearest_waypoint_idx(self) -> int:
        path = self.scenario.path
        nearest = min(range(len(path)),
                      key=lambda i: math.hypot(path[i][0] - self.x,
                                               path[i][1] - self.y))
        return (nearest + 1) % len(path)

    def _target_waypoint(self, t_ms: int):
        path = self.scenario.path
        inj = self._active("counterintuitive_path", t_ms)
        if inj is not None:
            if self._shuffled_order is None:
                order = list(range(len(path)))
                self._rng.shuffle(order)
                self._shuffled_order = order
                self.waypoint_idx = 0
                self._retarget_at = t_ms + RETARGET_MS
            if t_ms >= self._retarget_at:
                self.waypoint_idx = (self.waypoint_idx + 1) % len(path)
                self._retarget_at = t_ms + RETARGET_MS
            return path[self._shuffled_order[self.waypoint_idx % len(path)]]
        if self._shuffled_order is not None:
            # injection over: rejoin the path at the nearest point, without
            # the violent swing back to a stale target
            self._shuffled_order = None
            self.waypoint_idx = self._nearest_waypoint_idx()
        return path[self.waypoint_idx % len(path)]

    def _advance_waypoint_if_reached(self, wp) -> None:
        if math.hypot(wp[0] - self.x, wp[1] - self.y) < WAYPOINT_TOLERANCE:
            self.waypoint_idx = (self.waypoint_idx + 1) % len(self.scenario.path)

    def _controller(self, t_ms: int) -> tuple[float, float]:
        wp = self._target_waypoint(t_ms)
        self._advance_waypoint_if_reached(wp)
        desired = math.atan2(wp[1] - self.y, wp[0] - self.x)
        err = _wrap_angle(desired - self.heading)
        steer = max(-math.pi, min(math.pi, HEADING_GAIN * err))
        # slew-limited steering: path-following corrections ramp instead of
        # snapping, so recoveries read as maneuvers, not command spikes
        slew = STEER_SLEW_PER_TICK
        steer = max(self._last_steer - slew, min(self._last_steer + slew, steer))
        self._last_steer = steer
        angular = steer
        speed = self.scenario.nominal_speed * max(math.cos(err), 0.0)

        varying = self._active("varying_speed", t_ms)
        if varying is not None:
            if t_ms % SPEED_RESAMPLE_MS < self.scenario.tick_ms:
                m = varying.resolved_magnitude()
                self.speed_factor = self._rng.uniform(1.0 - m, 1.0 + m)
            speed *= self.speed_factor
        else:
            self.speed_factor = 1.0

        jerky = self._active("jerky_direction", t_ms)
        if jerky is not None:
            self._jerk_sign = -self._jerk_sign
            angular = self._jerk_sign * jerky.resolved_magnitude()
            angular = max(-math.pi, min(math.pi, angular))

        # controller dither keeps value baselines honestly noisy
        angular = max(-math.pi, min(math.pi, angular + self._rng.gauss(0.0, 0.02)))
        speed += self._rng.gauss(0.0, 0.01)

        if self.safe_mode and self.safe_speed_limit is not None:
            speed = max(-self.safe_speed_limit, min(self.safe_speed_limit, speed))
        speed = max(-3.0, min(3.0, speed))
        return speed, angular

    # -- tick -------------------------------------------------------------------

    def _publish(self, topic: str, payload: dict, t_ms: int) -> None:
        receipt = self.bus.publish(self._handles[topic], payload, t_ms)
        self.published[topic] = self.published.get(topic, 0) + 1
        if not receipt.accepted:
            self.rejected_counts[topic] = self.rejected_counts.get(topic, 0) + 1

    def tick(self, t_ms: int) -> None:
        """Advance one simulation step at absolute time t_ms."""
        self.now_ms = t_ms
        self._activate_live(t_ms)
        tick_idx = t_ms // self.scenario.tick_ms

        disconnected = self._active("controller_disconnect", t_ms) is not None
        if self._was_disconnected and not disconnected:
            self.waypoint_idx = self._nearest_waypoint_idx()
        self._was_disconnected = disconnected

        linear, angular = self._controller(t_ms)
        if not disconnected:
            self.cmd_linear, self.cmd_angular = linear, angular
            self._publish("/cmd_vel", {"linear": linear, "angular": angular}, t_ms)

        # base executes the last accepted command (held across disconnects)
        dt = self.scenario.tick_ms / 1000.0
        self.heading = _wrap_angle(self.heading + self.cmd_angular * dt)
        self.x += self.cmd_linear * math.cos(self.heading) * dt
        self.y += self.cmd_linear * math.sin(self.heading) * dt

        self._publish("/odom", {
            "x": round(self.x, 6), "y": round(self.y, 6),
            "heading": round(self.heading, 6),
            "speed": round(self.cmd_linear, 6)}, t_ms)

        if tick_idx % self._periods["/scan_summary"] == 0:
            self._publish_scan(t_ms)
        if tick_idx % self._periods["/battery"] == 0:
            self._publish_battery(t_ms)
        if tick_idx % self._periods["/sys/cpu/teleop"] == 0:
            for node in CPU_NODES:
                load = self._cpu_base[node] + self._rng.gauss(0.0, 0.02)
                self._publish(f"/sys/cpu/{node}",
                              {"load": round(max(0.0, min(1.0, load)), 6)}, t_ms)

    def _publish_scan(self, t_ms: int) -> None:
        splash = self._active("sensor_splash", t_ms)
        if splash is not None:
            value = SCAN_CEILING + max(splash.resolved_magnitude(), 0.5)
            payload = {"range_min": round(value, 6), "range_mean": round(value, 6)}
        else:
            mean = 6.0 + self._rng.gauss(0.0, 0.15)
            low = 1.8 + self._rng.gauss(0.0, 0.05)
            payload = {
                "range_min": round(max(0.05, min(12.9, low)), 6),
                "range_mean": round(max(0.05, min(12.9, mean)), 6),
            }
        self._publish("/scan_summary", payload, t_ms)

    def _publish_battery(self, t_ms: int) -> None:
        frac = t_ms / max(self.scenario.duration_ms, 1)
        voltage = 12.6 - 0.4 * frac + self._rng.gauss(0.0, 0.01)
        charge = 1.0 - 0.08 * frac
        self._publish("/battery", {
            "voltage": round(max(10.1, min(12.9, voltage)), 6),
            "charge": round(max(0.0, min(1.0, charge)), 6)}, t_ms)

    # -- whole-run driver ---------------------------------------------------------

    def run(self, tick_hook=None) -> ScenarioReport:
        """Run the full scenario; tick_hook(t_ms) is called after each tick."""
        self.running = True
        try:
            n_ticks = self.scenario.duration_ms // self.scenario.tick_ms
            for i in range(n_ticks):
                t_ms = i * self.scenario.tick_ms
                self.tick(t_ms)
                if tick_hook is not None:
                    tick_hook(t_ms)
        finally:
            self.running = False
        return ScenarioReport(
            messages_published=dict(sorted(self.published.items())),
            rejected=dict(sorted(self.rejected_counts.items())),
            labels=list(self.labels),
            ticks=n_ticks,
            duration_ms=self.scenario.duration_ms,
        )

    # -- snapshot support -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading,
                "waypoint_idx": self.waypoint_idx,
                "cmd_linear": self.cmd_linear, "cmd_angular": self.cmd_angular,
                "speed_factor": self.speed_factor}

    def load_state_dict(self, state: dict) -> None:
        self.x = state["x"]
        self.y = state["y"]
        self.heading = state["heading"]
        self.waypoint_idx = state["waypoint_idx"]
        self.cmd_linear = state["cmd_linear"]
        self.cmd_angular = state["cmd_angular"]
        self.speed_factor = state["speed_factor"]


def run_scenario(scenario: Scenario, bus: Bus, tick_hook=None) -> ScenarioReport:
    return ScenarioRunner(scenario, bus).run(tick_hook=tick_hook)


# -- path library -------------------------------------------------------------


def circle_path(radius: float = 3.0, points: int = 24, center=(0.0, 0.0)) -> list:
    return [(center[0] + radius * math.cos(2 * math.pi * k / points),
             center[1] + radius * math.sin(2 * math.pi * k / points))
            for k in range(points)]


def figure8_path(radius: float = 2.5, points: int = 32) -> list:
    # lemniscate of Gerono, sampled densely so turns stay gentle
    return [(radius * math.sin(2 * math.pi * k / points),
             radius * math.sin(2 * math.pi * k / points)
             * math.cos(2 * math.pi * k / points))
            for k in range(points)]


def rounded_square_path(side: float = 4.0, corner_points: int = 5) -> list:
    half = side / 2
    r = side / 4
    centers = [(half - r, half - r), (-(half - r), half - r),
               (-(half - r), -(half - r)), (half - r, -(half - r))]
    start_angles = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    pts = []
    for (cx, cy), a0 in zip(centers, start_angles):
        for k in range(corner_points):
            a = a0 + (math.pi / 2) * k / (corner_points - 1)
            pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


NAMED_PATHS = {
    "circle": circle_path,
    "figure8": figure8_path,
    "rounded_square": rounded_square_path,
}
