"""Command line entry point: ``evcount {count,sim,closed-loop,gen}``.

Exit codes: 0 ok, 1 usage error, 2 I/O or malformed input, 3 run ended by
the safety latch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .control import FlowSetpoint, PidController, SafetyMonitor
from .detection import DetectionParams
from .events import MAGIC, EventError, EventWriter, SensorGeometry, iter_chunks
from .filtering import ActivityFilterParams
from .frames import AccumulationParams
from .pipeline import PipelineParams, count_stream
from .report import RunReport, write_trace_csv
from .runs import run_closed_loop
from .simulator import SimParams, generate, on_fraction_for_rate
from .tracking import TrackerParams

log = logging.getLogger("evcount")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRIP = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(n):
    def parse(text):
        try:
            vals = [int(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers")
        return tuple(vals)
    return parse


def _grain_size(text):
    parts = text.split(",")
    try:
        vals = [int(v) for v in parts]
    except ValueError:
        raise argparse.ArgumentTypeError("grain size is N or MIN,MAX") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise argparse.ArgumentTypeError("grain size is N or MIN,MAX")


def _add_geometry(p):
    p.add_argument("--width", type=int, default=1280)
    p.add_argument("--height", type=int, default=720)


def _add_pipeline(p):
    g = p.add_argument_group("pipeline")
    g.add_argument("--filter-radius", type=int, default=1)
    g.add_argument("--filter-window-us", type=int, default=5000)
    g.add_argument("--no-activity-filter", action="store_true")
    g.add_argument("--accumulation-us", type=int, default=2000)
    g.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    g.add_argument("--min-area", type=int, default=4)
    g.add_argument("--lines", type=_int_list(3), default=None, metavar="Y1,Y2,Y3")
    g.add_argument("--iou-threshold", type=float, default=0.1)
    g.add_argument("--max-missed-frames", type=int, default=0)


def _add_sim(p):
    g = p.add_argument_group("simulator")
    g.add_argument("--seed", type=int, default=0, help="overridden by $EVCOUNT_SEED")
    g.add_argument("--duration-s", type=int, default=60)
    g.add_argument("--emission-rate", type=float, default=40.0, help="grains/s at full duty")
    g.add_argument("--noise-rate", type=float, default=0.5, help="noise events per pixel per second")
    g.add_argument("--grain-size", type=_grain_size, default=(6, 14), metavar="N|MIN,MAX")
    g.add_argument("--pixels-per-meter", type=float, default=2000.0)
    g.add_argument("--distinct-columns", action="store_true")


def _add_control(p):
    g = p.add_argument_group("controller")
    g.add_argument("--setpoint", type=float, required=True, help="grains per minute")
    g.add_argument("--kp", type=float, default=2.0)
    g.add_argument("--ki", type=float, default=0.2)
    g.add_argument("--kd", type=float, default=0.1)
    g.add_argument("--actuation-scale", type=float, default=0.01)
    g.add_argument("--congestion-window-s", type=int, default=10)


def _add_outputs(p):
    p.add_argument("--csv", type=Path, help="write the per-second count CSV here")
    p.add_argument("--json", type=Path, help="write the JSON summary here")


def _add_recording(p):
    p.add_argument("--events-out", type=Path, help="record the generated event stream")
    p.add_argument("--events-format", choices=("binary", "csv"), help="default: from the file extension")
    p.add_argument("--truth-out", type=Path, help="ground-truth CSV grain_id,spawn_t_us,exit_t_us")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evcount", description="Count falling objects in event-camera streams.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("count", help="count objects in a recorded event file")
    p.add_argument("input", type=Path)
    p.add_argument("--format", choices=("auto", "binary", "csv"), default="auto")
    _add_geometry(p)
    _add_pipeline(p)
    _add_outputs(p)
    p.add_argument("--concurrent", action="store_true", help="run pipeline stages on worker threads")
    p.add_argument("--dump-frames", type=Path, metavar="DIR", help="write every non-empty frame as PGM")

    for name, text in (("sim", "closed-loop simulation, optionally recorded"),
                       ("closed-loop", "closed-loop simulation, controller trace on stdout")):
        p = sub.add_parser(name, help=text)
        _add_geometry(p)
        _add_sim(p)
        _add_control(p)
        _add_pipeline(p)
        _add_outputs(p)
        p.add_argument("--trace", type=Path, help="write the per-tick controller CSV here")
        if name == "sim":
            _add_recording(p)

    p = sub.add_parser("gen", help="generate a constant-feed synthetic recording")
    _add_geometry(p)
    _add_sim(p)
    rate = p.add_mutually_exclusive_group(required=True)
    rate.add_argument("--rate", type=float, help="mean grains per minute")
    rate.add_argument("--on-fraction", type=float, help="constant feeder duty in [0, 1]")
    _add_recording(p)
    p.add_argument("--json", type=Path, help="write the JSON summary here")
    return parser


def _pipeline_params(a) -> PipelineParams:
    return PipelineParams(
        activity=None if a.no_activity_filter else ActivityFilterParams(a.filter_radius, a.filter_window_us),
        accumulation=AccumulationParams(a.accumulation_us),
        detection=DetectionParams(a.connectivity, a.min_area),
        tracker=TrackerParams(a.iou_threshold, a.max_missed_frames),
        lines=a.lines,
    )


def _seed(a) -> int:
    env = os.environ.get("EVCOUNT_SEED")
    if env is None:
        return a.seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"EVCOUNT_SEED must be an integer, got {env!r}") from None


def _sim_params(a, geometry) -> SimParams:
    return SimParams(
        geometry=geometry,
        emission_rate=a.emission_rate,
        grain_size=a.grain_size,
        pixels_per_meter=a.pixels_per_meter,
        noise_rate=a.noise_rate,
        distinct_columns=a.distinct_columns,
        seed=_seed(a),
    )


def _sim_echo(sp: SimParams) -> dict:
    return {
        "seed": sp.seed,
        "width": sp.geometry.width,
        "height": sp.geometry.height,
        "emission_rate": sp.emission_rate,
        "noise_rate": sp.noise_rate,
        "grain_size": list(sp.grain_size),
        "pixels_per_meter": sp.pixels_per_meter,
        "distinct_columns": sp.distinct_columns,
    }


def _sniff_format(path: Path, fmt: str) -> str:
    if fmt != "auto":
        return fmt
    if path.suffix.lower() == ".csv":
        return "csv"
    with open(path, "rb") as fh:
        return "binary" if fh.read(4) == MAGIC else "csv"


def _recording_format(a) -> str:
    if a.events_format:
        return a.events_format
    return "csv" if a.events_out.suffix.lower() == ".csv" else "binary"


def _emit(report: RunReport, a, csv_to_stdout: bool) -> None:
    if getattr(a, "csv", None):
        with open(a.csv, "w", newline="") as fh:
            report.write_csv(fh)
    elif csv_to_stdout:
        report.write_csv(sys.stdout)
    if a.json:
        a.json.write_text(report.to_json() + "\n")


def cmd_count(a) -> int:
    geometry = SensorGeometry(a.width, a.height)
    params = _pipeline_params(a)
    fmt = _sniff_format(a.input, a.format)
    on_frame = None
    if a.dump_frames:
        a.dump_frames.mkdir(parents=True, exist_ok=True)

        def on_frame(frame, boxes):
            if frame.n_lit:
                frame.write_pgm(a.dump_frames / f"frame_{frame.index:07d}.pgm")

    # binary files carry their own geometry
    chunks = iter_chunks(a.input, fmt, geometry if fmt == "csv" else None)
    first = next(chunks, None)
    if first is not None:
        geometry = first.geometry

    def all_chunks():
        if first is not None:
            yield first
            yield from chunks

    result = count_stream(all_chunks(), geometry, params, concurrent=a.concurrent, on_frame=on_frame)
    report = RunReport.from_totals(
        "count", result.second_totals,
        params={"input": str(a.input), "format": fmt, **params.echo()},
        events=result.events_in, wall_time_s=result.wall_time_s,
        extra={"per_line_counts": result.per_line, "events_kept": result.events_kept, "frames": result.frames},
    )
    _emit(report, a, csv_to_stdout=True)
    print(f"count: {report.pipeline_count}", file=sys.stderr)
    return EXIT_OK


def _closed_loop(a, record: bool) -> int:
    try:
        setpoint = FlowSetpoint(a.setpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    geometry = SensorGeometry(a.width, a.height)
    sp = _sim_params(a, geometry)
    params = _pipeline_params(a)
    writer = None
    if record and a.events_out:
        writer = EventWriter(a.events_out, _recording_format(a), geometry)
    try:
        rep = run_closed_loop(
            sp, setpoint, a.duration_s, params,
            pid=PidController(a.kp, a.ki, a.kd),
            safety=SafetyMonitor(congestion_window_s=a.congestion_window_s),
            actuation_scale=a.actuation_scale,
            sink=writer.write if writer else None,
            stop_on_trip=True,
        )
        if writer is not None:
            for chunk in rep.scene.drain():
                writer.write(chunk)
    finally:
        if writer is not None:
            writer.close()
    if record and a.truth_out:
        rep.scene.write_ground_truth(a.truth_out)
    report = RunReport.from_totals(
        a.command, rep.second_totals,
        ground_truth=rep.ground_truth,
        expected=setpoint.expected(a.duration_s),
        params={**_sim_echo(sp), "setpoint": setpoint.rate, "duration_s": a.duration_s,
                "kp": a.kp, "ki": a.ki, "kd": a.kd, "actuation_scale": a.actuation_scale,
                "congestion_window_s": a.congestion_window_s, **params.echo()},
        events=rep.events, wall_time_s=rep.wall_time_s,
        extra={"tripped": rep.tripped, "trip_second": rep.trip_second, "spawned": rep.spawned},
    )
    if a.trace:
        with open(a.trace, "w", newline="") as fh:
            write_trace_csv(rep.trace, fh)
    elif a.command == "closed-loop":
        write_trace_csv(rep.trace, sys.stdout)
    _emit(report, a, csv_to_stdout=a.command == "sim")
    print(f"counted {report.pipeline_count} / expected {report.expected:g}"
          f" (truth {rep.ground_truth}){' SAFETY TRIP' if rep.tripped else ''}", file=sys.stderr)
    return EXIT_TRIP if rep.tripped else EXIT_OK


def cmd_gen(a) -> int:
    geometry = SensorGeometry(a.width, a.height)
    sp = _sim_params(a, geometry)
    if a.on_fraction is not None:
        if not 0 <= a.on_fraction <= 1:
            raise UsageError("--on-fraction must lie in [0, 1]")
        on = a.on_fraction
    else:
        if a.rate <= 0:
            raise UsageError("--rate must be positive")
        on = on_fraction_for_rate(sp, a.rate)
    if a.events_out is None:
        raise UsageError("gen needs --events-out")
    with EventWriter(a.events_out, _recording_format(a), geometry) as w:
        scene = generate(sp, a.duration_s, on, sink=w.write)
        n = w.count
    if a.truth_out:
        scene.write_ground_truth(a.truth_out)
    # no counting happens here, so this is not a RunReport
    summary = {
        "command": "gen",
        "ground_truth": scene.ground_truth,
        "spawned": scene.spawned,
        "events": n,
        "params": {**_sim_echo(sp), "on_fraction": on, "duration_s": a.duration_s},
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if a.json:
        a.json.write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "count": cmd_count,
    "sim": lambda a: _closed_loop(a, record=True),
    "closed-loop": lambda a: _closed_loop(a, record=False),
    "gen": cmd_gen,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"evcount: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EventError, OSError) as exc:
        print(f"evcount: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # invalid parameter combinations surface from the dataclass validators
        print(f"evcount: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
