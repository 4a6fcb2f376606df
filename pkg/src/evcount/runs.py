"""Experiments on the simulated stand: closed-loop regulation and stop-after-N counting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .control import FlowController, FlowSetpoint, PidController, SafetyMonitor, TickRecord
from .events import EventStream
from .pipeline import CountingPipeline, PipelineParams
from .simulator import US_PER_S, GrainScene, SimParams

Sink = Callable[[EventStream], None]


@dataclass
class ClosedLoopReport:
    setpoint: float
    duration_s: int
    second_totals: list[int]  # pipeline total at the end of each simulated second
    ground_truth: int
    spawned: int
    trace: list[TickRecord]
    tripped: bool
    trip_second: int | None
    events: int
    wall_time_s: float
    scene: GrainScene = field(repr=False)

    @property
    def counted(self) -> int:
        return self.second_totals[-1] if self.second_totals else 0

    @property
    def expected(self) -> float:
        return self.setpoint * len(self.second_totals) / 60.0

    @property
    def relative_error(self) -> float:
        return (self.counted - self.expected) / self.expected

    def rate_over_last(self, seconds: int = 60) -> float:
        """Counted grains per minute over the final ``seconds``."""
        totals = [0] + self.second_totals
        seconds = min(seconds, len(self.second_totals))
        return (totals[-1] - totals[-1 - seconds]) * 60.0 / seconds


def run_closed_loop(
    sim: SimParams,
    setpoint: float | FlowSetpoint,
    duration_s: int,
    pipeline: PipelineParams | None = None,
    pid: PidController | None = None,
    safety: SafetyMonitor | None = None,
    actuation_scale: float = 0.01,
    sink: Sink | None = None,
    stop_on_trip: bool = False,
) -> ClosedLoopReport:
    """Regulate the simulated feeder for ``duration_s`` seconds.

    Each simulated second runs at the duty chosen at the previous tick (0 for
    the first second); the pipeline then closes every frame of that second
    and the controller ticks on the running total. A safety trip is recorded
    in the report; with ``stop_on_trip`` the run also ends there.
    """
    if not isinstance(setpoint, FlowSetpoint):
        setpoint = FlowSetpoint(setpoint)
    start = time.perf_counter()
    scene = GrainScene(sim)
    pipe = CountingPipeline(sim.geometry, pipeline)
    ctrl = FlowController(setpoint, pid or PidController(), safety or SafetyMonitor(), actuation_scale)
    on = 0.0
    totals: list[int] = []
    trip_second = None
    events = 0
    for second in range(1, int(duration_s) + 1):
        chunk = scene.advance(US_PER_S, on)
        events += len(chunk)
        if sink is not None:
            sink(chunk)
        pipe.feed(chunk)
        pipe.advance_to(second * US_PER_S)
        totals.append(pipe.count)
        on = ctrl.tick(second, pipe.count).on_fraction
        if ctrl.safety.tripped and trip_second is None:
            trip_second = second
            if stop_on_trip:
                break
    return ClosedLoopReport(
        setpoint=setpoint.rate,
        duration_s=int(duration_s),
        second_totals=totals,
        ground_truth=scene.ground_truth,
        spawned=scene.spawned,
        trace=ctrl.trace,
        tripped=ctrl.safety.tripped,
        trip_second=trip_second,
        events=events,
        wall_time_s=time.perf_counter() - start,
        scene=scene,
    )


@dataclass
class FixedCountReport:
    stop_after: int
    pipeline_count: int
    ground_truth: int
    stop_time_us: int | None
    second_totals: list[int]
    events: int
    wall_time_s: float
    scene: GrainScene = field(repr=False)

    @property
    def error(self) -> int:
        return self.pipeline_count - self.ground_truth


def run_fixed_count(
    sim: SimParams,
    stop_after: int,
    on_fraction: float,
    pipeline: PipelineParams | None = None,
    check_us: int = 10_000,
    max_duration_s: float = 3600.0,
    sink: Sink | None = None,
) -> FixedCountReport:
    """Feed at constant duty until the pipeline has counted ``stop_after`` grains.

    The feeder then stops, the grains already in the air fall out of view,
    and the final pipeline count is compared with the simulator's truth.
    """
    if stop_after < 1:
        raise ValueError("stop_after must be >= 1")
    start = time.perf_counter()
    scene = GrainScene(sim)
    pipe = CountingPipeline(sim.geometry, pipeline)
    events = 0

    def feed(chunk: EventStream) -> None:
        nonlocal events
        events += len(chunk)
        if sink is not None:
            sink(chunk)
        pipe.feed(chunk)
        pipe.advance_to(scene.t_us)

    stop_time = None
    limit = int(max_duration_s * US_PER_S)
    while scene.t_us < limit:
        feed(scene.advance(check_us, on_fraction))
        if pipe.count >= stop_after:
            stop_time = scene.t_us
            break
    # drain chunk by chunk: feed() closes frames up to the scene clock
    drained = 0
    while scene.in_flight and drained < 5 * US_PER_S:
        feed(scene.advance(check_us, 0.0))
        drained += check_us
    # one more frame period so the last crossings are closed out
    feed(scene.advance(check_us, 0.0))
    pipe.finish()
    return FixedCountReport(
        stop_after=stop_after,
        pipeline_count=pipe.count,
        ground_truth=scene.ground_truth,
        stop_time_us=stop_time,
        second_totals=list(pipe.second_totals),
        events=events,
        wall_time_s=time.perf_counter() - start,
        scene=scene,
    )
