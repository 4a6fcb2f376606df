"""Event-rate reduction ahead of frame building.

Two selectors, both returning an order-preserving subsequence of their input:

* :func:`polarity_filter` keeps one polarity.
* :class:`ActivityFilter` is the usual background-activity filter: a
  per-pixel "last seen" timestamp map, where an event survives only if some
  earlier event landed within ``radius`` pixels (Chebyshev) no more than
  ``time_window_us`` ago. Every event, kept or not, updates the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .events import EventStream, Polarity, SensorGeometry

NEVER = np.iinfo(np.int64).min


@dataclass(frozen=True)
class ActivityFilterParams:
    radius: int = 1
    time_window_us: int = 5000

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("activity filter radius must be >= 0")
        if self.time_window_us <= 0:
            raise ValueError("activity filter window must be > 0 us")


def polarity_filter(stream: EventStream, keep: Polarity = Polarity.POSITIVE) -> EventStream:
    return stream.select(stream.p == int(keep))


@numba.njit(cache=True, nogil=True)
def _activity_kernel(t, x, y, last, radius, window):
    n = t.shape[0]
    h, w = last.shape
    keep = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        ti = t[i]
        xi = x[i]
        yi = y[i]
        y0 = max(yi - radius, 0)
        y1 = min(yi + radius, h - 1)
        x0 = max(xi - radius, 0)
        x1 = min(xi + radius, w - 1)
        hit = False
        for yy in range(y0, y1 + 1):
            for xx in range(x0, x1 + 1):
                tl = last[yy, xx]
                # tl == NEVER would overflow the subtraction
                if tl != -9223372036854775808 and ti - tl <= window:
                    hit = True
                    break
            if hit:
                break
        keep[i] = hit
        last[yi, xi] = ti
    return keep


class ActivityFilter:
    """Streaming activity filter; feed chunks in time order."""

    def __init__(self, geometry: SensorGeometry, params: ActivityFilterParams | None = None):
        self.geometry = geometry
        self.params = params or ActivityFilterParams()
        self.last = np.full((geometry.height, geometry.width), NEVER, dtype=np.int64)

    def reset(self) -> None:
        self.last.fill(NEVER)

    def mask(self, chunk: EventStream) -> np.ndarray:
        """Survivor mask for ``chunk``; updates the timestamp map."""
        return _activity_kernel(chunk.t, chunk.x, chunk.y, self.last, self.params.radius, self.params.time_window_us)

    def __call__(self, chunk: EventStream) -> EventStream:
        if not len(chunk):
            return chunk
        return chunk.select(self.mask(chunk))


def activity_filter(stream: EventStream, params: ActivityFilterParams | None = None) -> EventStream:
    return ActivityFilter(stream.geometry, params)(stream)
