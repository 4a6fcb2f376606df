"""Fixed-period binary frames from positive events.

Frame ``k`` covers ``[k * period, (k + 1) * period)`` in absolute stream time.
A pixel is 255 when at least one positive event hit it inside the window and
0 otherwise. Windows with no events still produce (all-zero) frames so that
frame index maps linearly to time.

Frames keep their lit pixels as a sorted array of linear indices
``y * width + x``; :attr:`BinaryFrame.pixels` builds the dense image on demand.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .events import EventStream, Polarity, SensorGeometry


@dataclass(frozen=True)
class AccumulationParams:
    period_us: int = 2000

    def __post_init__(self):
        if self.period_us <= 0:
            raise ValueError("accumulation period must be > 0 us")


@dataclass(frozen=True, eq=False)
class BinaryFrame:
    geometry: SensorGeometry
    index: int
    window_start: int
    window_end: int
    coords: np.ndarray  # sorted unique linear pixel indices

    @property
    def pixels(self) -> np.ndarray:
        img = np.zeros(self.geometry.n_pixels, dtype=np.uint8)
        img[self.coords] = 255
        return img.reshape(self.geometry.height, self.geometry.width)

    @property
    def n_lit(self) -> int:
        return len(self.coords)

    def lit_xy(self) -> tuple[np.ndarray, np.ndarray]:
        y, x = np.divmod(self.coords, self.geometry.width)
        return x, y

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, index: int = 0, period_us: int = 2000) -> "BinaryFrame":
        pixels = np.asarray(pixels)
        h, w = pixels.shape
        return cls(SensorGeometry(w, h), index, index * period_us, (index + 1) * period_us,
                   np.flatnonzero(pixels.ravel()).astype(np.int64))

    def __eq__(self, other):
        if not isinstance(other, BinaryFrame):
            return NotImplemented
        return (self.geometry == other.geometry and self.index == other.index
                and self.window_start == other.window_start and self.window_end == other.window_end
                and np.array_equal(self.coords, other.coords))

    def write_pgm(self, path: str | os.PathLike) -> None:
        """Dump as binary PGM (P5), for eyeballing."""
        g = self.geometry
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (g.width, g.height))
            fh.write(self.pixels.tobytes())


class FrameAccumulator:
    """Streaming frame builder.

    ``push`` consumes a time-ordered chunk and yields every frame whose window
    closed before the chunk's last event; ``advance_to(t)`` closes all windows
    ending at or before ``t``; ``finish`` closes the window holding the last
    event seen. Negative events are ignored.
    """

    def __init__(self, geometry: SensorGeometry, params: AccumulationParams | None = None):
        self.geometry = geometry
        self.params = params or AccumulationParams()
        self.next_index = 0  # first frame not yet emitted
        self._pending: list[np.ndarray] = []  # coords for frame next_index
        self._last_t: int | None = None

    def _frame(self, index: int, coords: np.ndarray) -> BinaryFrame:
        p = self.params.period_us
        coords.flags.writeable = False
        return BinaryFrame(self.geometry, index, index * p, (index + 1) * p, coords)

    def _close(self, upto: int) -> Iterator[BinaryFrame]:
        """Emit frames ``next_index .. upto - 1``."""
        empty = np.zeros(0, dtype=np.int64)
        while self.next_index < upto:
            if self._pending:
                coords = np.unique(np.concatenate(self._pending))
                self._pending = []
            else:
                coords = empty.copy()
            yield self._frame(self.next_index, coords)
            self.next_index += 1

    def push(self, chunk: EventStream) -> Iterator[BinaryFrame]:
        if not len(chunk):
            return
        self._last_t = int(chunk.t[-1])
        pos = chunk.p == int(Polarity.POSITIVE)
        t = chunk.t[pos]
        lin = chunk.y[pos].astype(np.int64) * self.geometry.width + chunk.x[pos]
        if not len(t):
            return
        period = self.params.period_us
        fidx = t // period
        first, last = int(fidx[0]), int(fidx[-1])
        if first < self.next_index:
            raise ValueError(f"event at t={int(t[0])} falls in already-emitted frame {first}")
        bounds = np.searchsorted(fidx, np.arange(first, last + 2))
        for k in range(first, last + 1):
            if k > self.next_index:
                yield from self._close(k)
            seg = lin[bounds[k - first]:bounds[k - first + 1]]
            if len(seg):
                self._pending.append(seg)

    def advance_to(self, t_us: int) -> Iterator[BinaryFrame]:
        """Close every window ending at or before ``t_us``."""
        yield from self._close(t_us // self.params.period_us)

    def finish(self) -> Iterator[BinaryFrame]:
        if self._last_t is None:
            return
        yield from self._close(self._last_t // self.params.period_us + 1)


def accumulate(stream: EventStream | Iterable[EventStream], params: AccumulationParams | None = None,
               geometry: SensorGeometry | None = None) -> list[BinaryFrame]:
    """All frames from t=0 through the window containing the last event."""
    chunks = [stream] if isinstance(stream, EventStream) else list(stream)
    if geometry is None:
        geometry = chunks[0].geometry if chunks else SensorGeometry()
    acc = FrameAccumulator(geometry, params)
    frames: list[BinaryFrame] = []
    for c in chunks:
        frames.extend(acc.push(c))
    frames.extend(acc.finish())
    return frames
