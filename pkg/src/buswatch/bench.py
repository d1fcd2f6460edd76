"""The shipped benchmark suite: paths, stacks, and injection grids.

Five seeded scenarios (distinct closed paths) crossed with the four
detectable injection kinds give the twenty-run grid the evaluation targets:
recall at or above 0.70 with at most 0.5 false alarms per minute before any
operator training. The sensor-splash kind ships too, but as an invalid-data
case: it must be filtered, not alarmed.
"""

from __future__ import annotations

from .simbot import (
    Injection,
    Scenario,
    circle_path,
    figure8_path,
    rounded_square_path,
)

DETECTABLE_KINDS = ("jerky_direction", "controller_disconnect",
                    "counterintuitive_path", "varying_speed")

BENCH_DURATION_MS = 60_000
BENCH_TICK_MS = 50
BENCH_INJECTION_WINDOW = (25_000, 31_000)
BENCH_SEEDS = (101, 202, 303, 404, 505)


def bench_paths() -> dict:
    return {
        "circle": circle_path(radius=3.0, points=24),
        "wide-circle": circle_path(radius=4.5, points=30),
        "figure8": figure8_path(radius=2.5, points=32),
        "rounded-square": rounded_square_path(side=4.0, corner_points=6),
        "oval": [(3.5 * c[0] / 3.0, 2.0 * c[1] / 3.0)
                 for c in circle_path(radius=3.0, points=28)],
    }


def default_detector_docs() -> list[dict]:
    return [
        {"id": "rate-cmd", "kind": "extreme", "target": "rate:/cmd_vel",
         "t": 4.0, "baseline_window_count": 10},
        {"id": "rate-odom", "kind": "extreme", "target": "rate:/odom",
         "t": 4.0, "baseline_window_count": 10},
        {"id": "cmd-angular", "kind": "extreme",
         "target": "absvalue:/cmd_vel:angular", "t": 6.0,
         "baseline_window_count": 10},
        {"id": "odom-speed", "kind": "extreme", "target": "value:/odom:speed",
         "t": 6.0, "baseline_window_count": 10},
        {"id": "scan-level", "kind": "extreme",
         "target": "value:/scan_summary:range_mean", "t": 6.0,
         "baseline_window_count": 10},
        {"id": "odom-cmd-ratio", "kind": "abnormal",
         "target": "ratio:/odom:/cmd_vel", "t": 0.25, "r_hat": 1.0},
        {"id": "rate-shape", "kind": "isolated",
         "target": ["rate:/cmd_vel", "rate:/odom"],
         "t": 3.0, "n": 1, "history": 120, "baseline_window_count": 10},
        {"id": "cpu-group", "kind": "extreme", "target": "group:compute:cpu",
         "t": 6.0, "baseline_window_count": 10},
    ]


def default_envelope_doc() -> dict:
    return {
        "dims": [
            {"name": "speed", "unit": "m/s",
             "source": {"topic": "/odom", "field": "speed", "abs": True},
             "n": [0.0, 0.8], "fos": [0.0, 1.2], "oe": [0.0, 3.0]},
            {"name": "cpu", "unit": "load",
             "source": {"topic": "/sys/cpu/nav", "field": "load", "abs": False},
             "n": [0.0, 0.7], "fos": [0.0, 0.85], "oe": [0.0, 1.0]},
        ],
        "risk": {"combine": "max", "p": 2.0, "leak_per_s": 0.1, "cutoff": 1.0,
                 "count_trigger": {"m": 6, "window_ms": 20_000}},
    }


def default_alarm_policy_doc() -> dict:
    return {"window_ms": 10_000, "persist_threshold": 2,
            "suppression_cutoff": 0.8, "min_evidence": 4}


def default_grouping_docs() -> list[dict]:
    return [{"group": "compute", "all": ["cpu-reporting"]}]


def bench_scenario(path_name: str, seed: int, kind: str | None = None,
                   magnitude: float | None = None,
                   window: tuple = BENCH_INJECTION_WINDOW) -> Scenario:
    injections = []
    if kind is not None:
        injections.append(Injection(kind=kind, start_ms=window[0],
                                    end_ms=window[1], magnitude=magnitude))
    return Scenario(
        path=bench_paths()[path_name],
        nominal_speed=0.5,
        duration_ms=BENCH_DURATION_MS,
        tick_ms=BENCH_TICK_MS,
        seed=seed,
        injections=injections,
    )


def bench_grid() -> list[dict]:
    """The 4 kinds x 5 scenarios evaluation grid."""
    cells = []
    for (path_name, seed) in zip(sorted(bench_paths()), BENCH_SEEDS):
        for kind in DETECTABLE_KINDS:
            cells.append({"path": path_name, "seed": seed, "kind": kind})
    return cells


def scenario_to_doc(sc: Scenario) -> dict:
    return {
        "path": [[x, y] for x, y in sc.path],
        "nominal_speed": sc.nominal_speed,
        "duration_ms": sc.duration_ms,
        "tick_ms": sc.tick_ms,
        "seed": sc.seed,
        "injections": [
            {"kind": i.kind, "start_ms": i.start_ms, "end_ms": i.end_ms}
            | ({"magnitude": i.magnitude} if i.magnitude is not None else {})
            for i in sc.injections
        ],
    }
