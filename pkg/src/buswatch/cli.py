"""Command-line entry points: run, eval, export, replay, serve, bench."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import bench as benchlib
from .bench import (
    default_alarm_policy_doc,
    default_detector_docs,
    default_envelope_doc,
    default_grouping_docs,
)
from .capture import export_trace, load_topic_snapshot, read_trace, replay_trace
from .detectors import build_detector, load_detector_configs
from .errors import BuswatchError
from .evaluate import evaluate, evaluate_run_dir, format_report
from .features import CalendarMap
from .harness import SimulationHarness
from .msgbus import Bus
from .pipeline import Pipeline
from .simbot import DEFAULT_MAGNITUDE, INJECTION_KINDS, Injection, Scenario

INJECT_ALIASES = {
    "jerky": "jerky_direction",
    "disconnect": "controller_disconnect",
    "counterintuitive": "counterintuitive_path",
    "varying": "varying_speed",
    "splash": "sensor_splash",
}


def _load_yaml(path, what: str):
    p = Path(path)
    if not p.exists():
        raise click.UsageError(f"{what} file not found: {p}")
    try:
        return yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise click.UsageError(f"cannot parse {what} {p}: {exc}")


def _stack_docs(detectors, envelope, alarms, grouping):
    det = _load_yaml(detectors, "detectors") if detectors else default_detector_docs()
    env = _load_yaml(envelope, "envelope") if envelope else default_envelope_doc()
    pol = _load_yaml(alarms, "alarm policy") if alarms else default_alarm_policy_doc()
    grp = _load_yaml(grouping, "grouping") if grouping else default_grouping_docs()
    return det, env, pol, grp


@click.group()
def main():
    """Anomaly detection for robotic pub-sub telemetry."""


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--inject", "inject_csv", default=None,
              help="extra injection kinds, comma separated "
                   "(jerky,disconnect,counterintuitive,varying,splash)")
@click.option("--seed", type=int, default=None, help="override the scenario seed")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="run directory for trace/labels/alarms artifacts")
@click.option("--detectors", type=click.Path(), default=None)
@click.option("--envelope", type=click.Path(), default=None)
@click.option("--alarms", "alarm_policy", type=click.Path(), default=None)
@click.option("--grouping", type=click.Path(), default=None)
@click.option("--no-validity-filter", is_flag=True, default=False)
@click.option("--window-ms", type=int, default=1000)
@click.option("--evaluate", "run_eval", is_flag=True, default=False,
              help="score the run immediately and write eval.json")
def run(scenario_path, inject_csv, seed, out_dir, detectors, envelope,
        alarm_policy, grouping, no_validity_filter, window_ms, run_eval):
    """Run a scenario with the detection stack; write the run artifacts."""
    doc = _load_yaml(scenario_path, "scenario")
    try:
        scenario = Scenario.from_dict(doc)
        if seed is not None:
            scenario.seed = seed
        if inject_csv:
            _append_injections(scenario, inject_csv)
        scenario.validate()
        det, env, pol, grp = _stack_docs(detectors, envelope, alarm_policy, grouping)
        harness = SimulationHarness(
            scenario, det, env, pol, grp,
            validity_filter=not no_validity_filter,
            out_dir=out_dir, window_ms=window_ms)
        report = harness.run()
    except BuswatchError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"published: {sum(report.scenario_report.messages_published.values())}"
               f" messages over {scenario.duration_ms} ms")
    click.echo(f"anomaly events: {report.anomaly_events}; "
               f"presented alarms: {report.presented_alarms}")
    if report.estop_fired:
        click.echo("emergency stop fired; system ended in safe mode")
    if out_dir:
        click.echo(f"artifacts in {out_dir}")
        if run_eval:
            rep = evaluate_run_dir(out_dir)
            click.echo(format_report(rep))


def _append_injections(scenario: Scenario, inject_csv: str) -> None:
    # first window lands past the baseline warm-up when the run is long
    # enough; shorter runs still place the injections, just earlier
    start = scenario.duration_ms // 3
    for token in inject_csv.split(","):
        token = token.strip()
        kind = INJECT_ALIASES.get(token, token)
        if kind not in INJECTION_KINDS:
            raise click.UsageError(f"unknown injection kind {token!r}")
        end = start + 6000
        if end > scenario.duration_ms:
            raise click.UsageError(
                f"not enough scenario time to place injection {token!r}")
        scenario.injections.append(Injection(
            kind=kind, start_ms=start, end_ms=end,
            magnitude=DEFAULT_MAGNITUDE[kind]))
        start = end + 4000


@main.command("eval")
@click.option("--run", "run_dir", type=click.Path(), default=None,
              help="run directory containing trace/labels/alarms")
@click.option("--trace", type=click.Path(), default=None)
@click.option("--labels", type=click.Path(), default=None)
@click.option("--alarms", type=click.Path(), default=None)
@click.option("--window-ms", type=int, default=None)
def eval_cmd(run_dir, trace, labels, alarms, window_ms):
    """Score alarms against ground truth labels."""
    try:
        if run_dir:
            report = evaluate_run_dir(run_dir, window_ms=window_ms)
        else:
            if not (trace and labels and alarms):
                raise click.UsageError(
                    "need --run DIR or all of --trace/--labels/--alarms")
            report = evaluate(trace, labels, alarms,
                              window_ms=window_ms or 1000)
        click.echo(format_report(report))
        click.echo(json.dumps(report))
    except BuswatchError as exc:
        raise click.UsageError(str(exc))


@main.command()
@click.argument("trace", type=click.Path())
@click.option("--format", "fmt", required=True,
              type=click.Choice(["jsonl", "csv", "yaml"]))
@click.option("--out", "out_path", type=click.Path(), default=None)
def export(trace, fmt, out_path):
    """Convert a trace file to jsonl, csv, or yaml (lossless)."""
    try:
        out = export_trace(trace, fmt, out_path)
    except BuswatchError as exc:
        raise click.UsageError(str(exc))
    click.echo(str(out))


@main.command()
@click.argument("trace", type=click.Path())
@click.option("--topics", "topics_path", type=click.Path(), default=None,
              help="topic snapshot (topics.json) saved with the trace")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="where to write the recomputed feature frames")
@click.option("--window-ms", type=int, default=1000)
def replay(trace, topics_path, out_path, window_ms):
    """Re-publish a trace into a fresh bus and recompute feature frames."""
    try:
        records = read_trace(trace)
        schemas = modes = None
        if topics_path:
            schemas, modes = load_topic_snapshot(topics_path)
        bus = Bus()
        pipeline = Pipeline(bus, detectors=[], window_ms=window_ms,
                            calendar=CalendarMap())
        count = replay_trace(records, bus, schemas=schemas, range_modes=modes)
        end = records[-1].t_ms + window_ms if records else window_ms
        pipeline.finish(end)
    except BuswatchError as exc:
        raise click.UsageError(str(exc))
    lines = [f.canonical() for f in pipeline.frame_log]
    if out_path:
        Path(out_path).write_text("\n".join(lines) + ("\n" if lines else ""),
                                  encoding="utf-8")
        click.echo(f"replayed {count} records -> {len(lines)} frames -> {out_path}")
    else:
        for line in lines:
            click.echo(line)


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
def bench(out_dir):
    """Run the shipped benchmark grid and print the aggregate score."""
    out = Path(out_dir)
    total = detected = 0
    false_alarms = 0
    minutes = 0.0
    for i, cell in enumerate(benchlib.bench_grid()):
        run_dir = out / f"{cell['path']}_{cell['kind']}"
        scenario = benchlib.bench_scenario(cell["path"], cell["seed"], cell["kind"])
        harness = SimulationHarness(
            scenario, default_detector_docs(), default_envelope_doc(),
            default_alarm_policy_doc(), default_grouping_docs(), out_dir=run_dir)
        harness.run()
        rep = evaluate_run_dir(run_dir)
        total += rep["injections"]
        detected += rep["detected"]
        false_alarms += rep["false_alarms"]
        minutes += rep["duration_ms"] / 60_000.0
        click.echo(f"{cell['path']:<16} {cell['kind']:<24} "
                   f"recall={rep['recall']:.0%} false={rep['false_alarms']}")
    recall = detected / total if total else None
    far = false_alarms / minutes if minutes else 0.0
    click.echo(f"\nrecall {detected}/{total} = {recall:.2f}   "
               f"false alarms/min = {far:.3f}")
    (out / "bench_summary.json").write_text(json.dumps({
        "recall": recall, "detected": detected, "injections": total,
        "false_alarm_rate_per_min": far}), encoding="utf-8")


@main.command()
@click.option("--scenario", "scenario_path", type=click.Path(), default=None,
              help="scenario to run on start (benchmark circle by default)")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8787)
@click.option("--speedup", type=float, default=1.0,
              help="simulated-time speedup over wall clock")
@click.option("--autostart/--no-autostart", default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def serve(scenario_path, host, port, speedup, autostart, out_dir):
    """Start the gateway API (and operator console, if built)."""
    import uvicorn

    from .gateway import GatewayRuntime, create_app

    if scenario_path:
        doc = _load_yaml(scenario_path, "scenario")
        scenario = Scenario.from_dict(doc)
    else:
        scenario = benchlib.bench_scenario("circle", 101, "jerky_direction")
    runtime = GatewayRuntime(scenario, speedup=speedup, out_dir=out_dir)
    app = create_app(runtime)
    if autostart:
        runtime.start_scenario()
    click.echo(f"gateway on http://{host}:{port} (speedup {speedup}x)")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
