"""The counting pipeline: activity filter -> polarity filter -> frames -> blobs -> tracker.

:class:`CountingPipeline` is the sequential reference. :func:`count_stream`
can also run the same stages on worker threads joined by bounded queues;
stage order and chunk order are preserved, so both modes give identical
results.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

from .detection import BoundingBox, DetectionParams, detect
from .events import EventStream, Polarity, SensorGeometry
from .filtering import ActivityFilter, ActivityFilterParams, polarity_filter
from .frames import AccumulationParams, BinaryFrame, FrameAccumulator
from .tracking import CountLines, Tracker, TrackerParams

US_PER_S = 1_000_000


@dataclass(frozen=True)
class PipelineParams:
    activity: ActivityFilterParams | None = field(default_factory=ActivityFilterParams)
    keep_polarity: Polarity = Polarity.POSITIVE
    accumulation: AccumulationParams = field(default_factory=AccumulationParams)
    detection: DetectionParams = field(default_factory=DetectionParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    lines: tuple[int, int, int] | None = None  # None: 40/50/60 % of height

    def count_lines(self, geometry: SensorGeometry) -> CountLines:
        lines = CountLines(self.lines) if self.lines is not None else CountLines.default(geometry.height)
        lines.check_height(geometry.height)
        return lines

    def echo(self) -> dict:
        a = self.activity
        return {
            "activity_filter": None if a is None else {"radius": a.radius, "time_window_us": a.time_window_us},
            "keep_polarity": int(self.keep_polarity),
            "accumulation_us": self.accumulation.period_us,
            "connectivity": self.detection.connectivity,
            "min_area": self.detection.min_area,
            "iou_threshold": self.tracker.iou_threshold,
            "max_missed_frames": self.tracker.max_missed_frames,
            "lines": list(self.lines) if self.lines else None,
        }


class EventStage:
    """Event-level filtering (stateful, order-preserving)."""

    def __init__(self, geometry: SensorGeometry, params: PipelineParams):
        self.activity = ActivityFilter(geometry, params.activity) if params.activity else None
        self.keep = params.keep_polarity

    def __call__(self, chunk: EventStream) -> EventStream:
        if self.activity is None:
            return polarity_filter(chunk, self.keep)
        if not len(chunk):
            return chunk
        # the activity map must see every polarity, so mask first, select once
        return chunk.select(self.activity.mask(chunk) & (chunk.p == int(self.keep)))


class FrameStage:
    """Frames, detection and tracking; records the count total per second."""

    def __init__(self, geometry: SensorGeometry, params: PipelineParams,
                 on_frame: Callable[[BinaryFrame, list[BoundingBox]], None] | None = None):
        self.geometry = geometry
        self.params = params
        self.acc = FrameAccumulator(geometry, params.accumulation)
        self.tracker = Tracker(params.count_lines(geometry), params.tracker)
        self.on_frame = on_frame
        self.second_totals: list[int] = []  # total at the end of each second
        self.frames = 0

    @property
    def count(self) -> int:
        return self.tracker.count

    def _consume(self, frames: Iterator[BinaryFrame]) -> None:
        for frame in frames:
            boxes = detect(frame, self.params.detection)
            total = self.tracker.update(frame.index, boxes)
            self.frames += 1
            if self.on_frame is not None:
                self.on_frame(frame, boxes)
            sec = frame.window_start // US_PER_S
            while len(self.second_totals) <= sec:
                self.second_totals.append(self.second_totals[-1] if self.second_totals else 0)
            self.second_totals[sec] = total

    def push(self, chunk: EventStream) -> None:
        self._consume(self.acc.push(chunk))

    def advance_to(self, t_us: int) -> None:
        self._consume(self.acc.advance_to(t_us))

    def finish(self) -> None:
        self._consume(self.acc.finish())


class CountingPipeline:
    """Sequential pipeline; feed time-ordered chunks, then call ``finish``."""

    def __init__(self, geometry: SensorGeometry, params: PipelineParams | None = None,
                 on_frame: Callable[[BinaryFrame, list[BoundingBox]], None] | None = None):
        self.params = params or PipelineParams()
        self.events = EventStage(geometry, self.params)
        self.frames = FrameStage(geometry, self.params, on_frame)
        self.events_in = 0
        self.events_kept = 0
        self._last_t = None

    @property
    def count(self) -> int:
        return self.frames.count

    @property
    def second_totals(self) -> list[int]:
        return self.frames.second_totals

    def feed(self, chunk: EventStream) -> None:
        self.events_in += len(chunk)
        kept = self.events(chunk)
        self.events_kept += len(kept)
        self.frames.push(kept)
        if len(chunk):
            self._last_t = int(chunk.t[-1])

    def advance_to(self, t_us: int) -> None:
        """Process every frame window that closes at or before ``t_us``."""
        self.frames.advance_to(t_us)

    def finish(self) -> None:
        # the last raw event may have been filtered out; its window still counts
        if self._last_t is not None:
            self.frames.advance_to((self._last_t // self.params.accumulation.period_us + 1)
                                   * self.params.accumulation.period_us)
        self.frames.finish()


@dataclass
class CountResult:
    total: int
    second_totals: list[int]
    events_in: int
    events_kept: int
    frames: int
    wall_time_s: float
    per_line: list[int]

    @property
    def throughput(self) -> float:
        return self.events_in / self.wall_time_s if self.wall_time_s > 0 else float("inf")


_END = object()


def _worker(fn, inq: queue.Queue, outq: queue.Queue, errors: list) -> None:
    try:
        while True:
            item = inq.get()
            if item is _END:
                break
            outq.put(fn(item))
    except BaseException as exc:  # propagated to the caller
        errors.append(exc)
    finally:
        outq.put(_END)


def count_stream(
    chunks: Iterable[EventStream],
    geometry: SensorGeometry,
    params: PipelineParams | None = None,
    concurrent: bool = False,
    queue_size: int = 4,
    on_frame: Callable[[BinaryFrame, list[BoundingBox]], None] | None = None,
) -> CountResult:
    """Count a whole recorded stream.

    In concurrent mode the source, the event filters and the frame stage run
    on separate threads joined by queues of at most ``queue_size`` chunks.
    """
    params = params or PipelineParams()
    start = time.perf_counter()
    pipe = CountingPipeline(geometry, params, on_frame)
    if not concurrent:
        for chunk in chunks:
            pipe.feed(chunk)
        pipe.finish()
    else:
        raw_q: queue.Queue = queue.Queue(maxsize=queue_size)
        kept_q: queue.Queue = queue.Queue(maxsize=queue_size)
        errors: list[BaseException] = []
        stop = threading.Event()

        def source():
            try:
                for chunk in chunks:
                    if stop.is_set():
                        break
                    raw_q.put(chunk)
            except BaseException as exc:
                errors.append(exc)
            finally:
                raw_q.put(_END)

        def filt(chunk):
            pipe.events_in += len(chunk)
            kept = pipe.events(chunk)
            pipe.events_kept += len(kept)
            return chunk.t[-1] if len(chunk) else None, kept

        threads = [
            threading.Thread(target=source, name="evcount-source", daemon=True),
            threading.Thread(target=_worker, args=(filt, raw_q, kept_q, errors), name="evcount-filter", daemon=True),
        ]
        for th in threads:
            th.start()
        try:
            while True:
                item = kept_q.get()
                if item is _END:
                    break
                last_t, kept = item
                pipe.frames.push(kept)
                if last_t is not None:
                    pipe._last_t = int(last_t)
        finally:
            stop.set()
            # unblock producers waiting on a full queue
            while any(th.is_alive() for th in threads):
                for q in (raw_q, kept_q):
                    try:
                        q.get_nowait()
                    except queue.Empty:
                        pass
                for th in threads:
                    th.join(timeout=0.01)
        if errors:
            raise errors[0]
        pipe.finish()
    return CountResult(
        total=pipe.count,
        second_totals=list(pipe.second_totals),
        events_in=pipe.events_in,
        events_kept=pipe.events_kept,
        frames=pipe.frames.frames,
        wall_time_s=time.perf_counter() - start,
        per_line=list(pipe.frames.tracker.lines.per_line_counts),
    )
