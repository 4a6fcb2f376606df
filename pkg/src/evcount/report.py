"""Run reports: a JSON summary plus per-second and per-tick CSV series."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, TextIO

from .control import TickRecord


def per_second_rows(second_totals: Sequence[int]) -> list[tuple[int, int, int]]:
    """``(second, count_delta, count_total)`` for every simulated/recorded second."""
    rows = []
    prev = 0
    for s, total in enumerate(second_totals):
        rows.append((s, total - prev, total))
        prev = total
    return rows


@dataclass
class RunReport:
    command: str
    pipeline_count: int
    per_second: list[tuple[int, int, int]]
    ground_truth: int | None = None
    expected: float | None = None
    params: dict = field(default_factory=dict)
    events: int = 0
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        summed = sum(d for _, d, _ in self.per_second)
        if summed != self.pipeline_count:
            raise ValueError(f"per-second deltas sum to {summed}, total is {self.pipeline_count}")

    @classmethod
    def from_totals(cls, command: str, second_totals: Sequence[int], **kw) -> "RunReport":
        total = second_totals[-1] if second_totals else 0
        return cls(command, total, per_second_rows(second_totals), **kw)

    @property
    def throughput(self) -> float:
        """Events processed per wall-clock second."""
        return self.events / self.wall_time_s if self.wall_time_s > 0 else 0.0

    def summary(self, timing: bool = True) -> dict:
        out = {
            "command": self.command,
            "totals": {
                "pipeline_count": self.pipeline_count,
                "ground_truth": self.ground_truth,
                "expected": self.expected,
            },
            "params": self.params,
            "events": self.events,
            **self.extra,
        }
        if timing:
            out["wall_time_s"] = round(self.wall_time_s, 3)
            out["throughput_events_per_s"] = round(self.throughput, 1)
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.summary(timing), indent=2, sort_keys=True)

    def write_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["second", "count_delta", "count_total"])
        w.writerows(self.per_second)

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def write_trace_csv(trace: Sequence[TickRecord], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["second", "error", "u", "on_fraction", "tripped"])
    for r in trace:
        w.writerow([r.second, repr(r.error), repr(r.u), repr(r.on_fraction), int(r.tripped)])


def trace_dicts(trace: Sequence[TickRecord]) -> list[dict]:
    return [asdict(r) for r in trace]
