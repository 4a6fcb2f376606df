"""Event data model and the CSV / binary event file formats.

An event is the quadruple ``(t, x, y, p)``: integer microsecond timestamp,
pixel column, pixel row and polarity (1 = positive, 0 = negative).
Streams are stored column-wise in numpy arrays; :class:`Event` is only used
when a single record is handed out.

Binary layout (little endian)::

    header   16 bytes   b"EVC1", u32 version (=1), u16 width, u16 height, 4 reserved zero bytes
    record   13 bytes   u64 t, u16 x, u16 y, u8 p   (packed, no padding)

CSV layout: one ``t,x,y,p`` line per event, decimal integers, LF endings,
no header.
"""

from __future__ import annotations

import enum
import io
import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Union

import numpy as np

MAGIC = b"EVC1"
VERSION = 1
HEADER = struct.Struct("<4sIHH4s")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert HEADER.size == 16 and RECORD_DTYPE.itemsize == 13

FORMATS = ("csv", "binary")

Source = Union[str, os.PathLike, BinaryIO, bytes]


class EventError(ValueError):
    """Base class for rejected event input."""


class EventFormatError(EventError):
    """A record could not be parsed. ``location`` is a CSV line (1-based) or a byte offset."""

    def __init__(self, message: str, location: int | None = None):
        super().__init__(message)
        self.location = location


class EventBoundsError(EventError):
    """A coordinate, timestamp or polarity is outside its allowed range."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class EventOrderError(EventError):
    """Timestamps decrease somewhere in the stream."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class Polarity(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: Polarity


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 1280
    height: int = 720

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"sensor geometry must be at least 1x1, got {self.width}x{self.height}")
        if self.width > 0xFFFF or self.height > 0xFFFF:
            raise ValueError("sensor geometry does not fit the u16 header fields")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def _frozen(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events over one sensor.

    Columns are read-only numpy arrays: ``t`` int64, ``x``/``y`` int32,
    ``p`` uint8. Use :func:`validate` (or the ``checked`` constructor) when
    the arrays come from an untrusted source.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    geometry: SensorGeometry = field(default_factory=SensorGeometry)

    def __post_init__(self):
        cols = {
            "t": np.asarray(self.t, dtype=np.int64),
            "x": np.asarray(self.x, dtype=np.int32),
            "y": np.asarray(self.y, dtype=np.int32),
            "p": np.asarray(self.p, dtype=np.uint8),
        }
        n = len(cols["t"])
        for name, col in cols.items():
            if col.ndim != 1 or len(col) != n:
                raise ValueError("event columns must be 1-D arrays of equal length")
            object.__setattr__(self, name, _frozen(col))

    @classmethod
    def empty(cls, geometry: SensorGeometry | None = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, geometry or SensorGeometry())

    @classmethod
    def from_events(cls, events: Iterable, geometry: SensorGeometry | None = None) -> "EventStream":
        rows = [tuple(int(v) for v in e) for e in events]
        if not rows:
            return cls.empty(geometry)
        a = np.array(rows, dtype=np.int64).reshape(-1, 4)
        return checked(a[:, 0], a[:, 1], a[:, 2], a[:, 3], geometry)

    @classmethod
    def concat(cls, streams: Iterable["EventStream"], geometry: SensorGeometry | None = None) -> "EventStream":
        streams = list(streams)
        if not streams:
            return cls.empty(geometry)
        geometry = geometry or streams[0].geometry
        return cls(
            np.concatenate([s.t for s in streams]),
            np.concatenate([s.x for s in streams]),
            np.concatenate([s.y for s in streams]),
            np.concatenate([s.p for s in streams]),
            geometry,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, Polarity(p))

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            return Event(int(self.t[item]), int(self.x[item]), int(self.y[item]), Polarity(int(self.p[item])))
        return EventStream(self.t[item], self.x[item], self.y[item], self.p[item], self.geometry)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self):
        span = f", t=[{self.t[0]}..{self.t[-1]}]" if len(self) else ""
        return f"EventStream(n={len(self)}{span}, {self.geometry.width}x{self.geometry.height})"

    def select(self, mask: np.ndarray) -> "EventStream":
        return EventStream(self.t[mask], self.x[mask], self.y[mask], self.p[mask], self.geometry)


def _check_columns(t, x, y, p, geometry: SensorGeometry, prev_t: int | None, first_index: int) -> None:
    checks = (
        (t < 0, "negative timestamp"),
        ((x < 0) | (x >= geometry.width), f"x outside [0, {geometry.width})"),
        ((y < 0) | (y >= geometry.height), f"y outside [0, {geometry.height})"),
        ((p < 0) | (p > 1), "polarity must be 0 or 1"),
    )
    for bad, what in checks:
        if bad.any():
            i = int(np.argmax(bad))
            row = (int(t[i]), int(x[i]), int(y[i]), int(p[i]))
            raise EventBoundsError(f"event {first_index + i}: {what} {row}", first_index + i)
    if len(t) == 0:
        return
    if prev_t is not None and t[0] < prev_t:
        raise EventOrderError(f"event {first_index}: timestamp {t[0]} < previous {prev_t}", first_index)
    back = np.flatnonzero(np.diff(t) < 0)
    if len(back):
        i = int(back[0]) + 1
        raise EventOrderError(f"event {first_index + i}: timestamp {t[i]} < previous {t[i - 1]}", first_index + i)


def validate(stream: EventStream, prev_t: int | None = None, first_index: int = 0) -> None:
    """Raise a typed :class:`EventError` on the first invariant violation.

    ``prev_t`` is the last timestamp of the preceding chunk when a stream is
    validated piecewise; ``first_index`` offsets the reported indices.
    """
    _check_columns(stream.t, stream.x, stream.y, stream.p, stream.geometry, prev_t, first_index)


def checked(t, x, y, p, geometry: SensorGeometry | None = None, prev_t: int | None = None, first_index: int = 0) -> EventStream:
    """Validate raw integer columns, then build a stream from them."""
    geometry = geometry or SensorGeometry()
    t, x, y, p = (np.asarray(c) for c in (t, x, y, p))
    if t.dtype == np.uint64 and len(t) and t.max() > np.iinfo(np.int64).max:
        i = int(np.argmax(t > np.iinfo(np.int64).max))
        raise EventBoundsError(f"event {first_index + i}: timestamp exceeds int64 range", first_index + i)
    _check_columns(t.astype(np.int64), x.astype(np.int64), y.astype(np.int64), p.astype(np.int64), geometry, prev_t, first_index)
    return EventStream(t, x, y, p, geometry)


# --------------------------------------------------------------------------- reading


class _Opened:
    """Context manager yielding a binary file object for any accepted source."""

    def __init__(self, source: Source, mode: str = "rb"):
        self.source = source
        self.mode = mode
        self._own = None

    def __enter__(self) -> BinaryIO:
        if isinstance(self.source, (bytes, bytearray, memoryview)):
            return io.BytesIO(bytes(self.source))
        if isinstance(self.source, (str, os.PathLike)):
            self._own = open(self.source, self.mode)
            return self._own
        return self.source

    def __exit__(self, *exc):
        if self._own is not None:
            self._own.close()


def read_header(fh: BinaryIO) -> SensorGeometry:
    raw = fh.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise EventFormatError(f"binary header truncated ({len(raw)} of {HEADER.size} bytes)", 0)
    magic, version, width, height, _ = HEADER.unpack(raw)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise EventFormatError(f"unsupported binary version {version}", 4)
    try:
        return SensorGeometry(width, height)
    except ValueError as exc:
        raise EventFormatError(str(exc), 8) from None


def _iter_binary(fh: BinaryIO, geometry: SensorGeometry | None, chunk_events: int, header_out=None):
    header_geometry = read_header(fh)
    if header_out is not None:
        header_out.append(header_geometry)
    if geometry is not None and geometry != header_geometry:
        raise EventFormatError(
            f"file geometry {header_geometry.width}x{header_geometry.height} does not match "
            f"requested {geometry.width}x{geometry.height}",
            8,
        )
    offset = HEADER.size
    while True:
        raw = fh.read(chunk_events * RECORD_DTYPE.itemsize)
        if not raw:
            return
        whole, rest = divmod(len(raw), RECORD_DTYPE.itemsize)
        if rest:
            raise EventFormatError(
                f"truncated record at byte offset {offset + whole * RECORD_DTYPE.itemsize}",
                offset + whole * RECORD_DTYPE.itemsize,
            )
        rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
        yield header_geometry, offset, rec["t"], rec["x"], rec["y"], rec["p"]
        offset += len(raw)


def _parse_csv_lines(lines: list[bytes], first_line: int):
    """Slow path: locate the first malformed line and report it."""
    out = np.empty((len(lines), 4), dtype=np.int64)
    for i, line in enumerate(lines):
        parts = line.rstrip(b"\r\n").split(b",")
        if len(parts) != 4:
            raise EventFormatError(f"line {first_line + i}: expected 4 fields, got {len(parts)}", first_line + i)
        try:
            out[i] = [int(v) for v in parts]
        except (ValueError, OverflowError):
            raise EventFormatError(f"line {first_line + i}: non-integer field in {line!r}", first_line + i) from None
    return out


def _iter_csv(fh: BinaryIO, geometry: SensorGeometry | None, chunk_events: int, header_out=None):
    geometry = geometry or SensorGeometry()
    line_no = 1
    while True:
        lines = fh.readlines(chunk_events * 24)
        if not lines:
            return
        try:
            with warnings.catch_warnings():
                # loadtxt accepts "1.5" as an int with only a warning
                warnings.simplefilter("error", DeprecationWarning)
                a = np.loadtxt(lines, dtype=np.int64, delimiter=",", ndmin=2, encoding="ascii")
            if a.shape != (len(lines), 4):
                raise ValueError
        except (ValueError, OverflowError, DeprecationWarning):
            a = _parse_csv_lines(lines, line_no)
        yield geometry, line_no, a[:, 0], a[:, 1], a[:, 2], a[:, 3]
        line_no += len(lines)


def iter_chunks(
    source: Source,
    format: str = "binary",
    geometry: SensorGeometry | None = None,
    chunk_events: int = 1 << 20,
) -> Iterator[EventStream]:
    """Yield validated chunks of a recorded stream, preserving file order."""
    with _Opened(source) as fh:
        yield from _chunks(fh, format, geometry, chunk_events)


def _chunks(fh, format, geometry, chunk_events, header_out=None):
    if format not in FORMATS:
        raise ValueError(f"unknown event format {format!r}; choose from {FORMATS}")
    parse = _iter_binary if format == "binary" else _iter_csv
    prev_t = None
    index = 0
    for geo, _, t, x, y, p in parse(fh, geometry, chunk_events, header_out):
        chunk = checked(t, x, y, p, geo, prev_t, index)
        if len(chunk):
            prev_t = int(chunk.t[-1])
        index += len(chunk)
        yield chunk


def read_events(source: Source, format: str = "binary", geometry: SensorGeometry | None = None) -> EventStream:
    """Read a whole stream.

    Binary files carry their own geometry (``geometry``, if given, must
    match it); CSV files use ``geometry``, defaulting to 1280x720.
    """
    header: list[SensorGeometry] = []
    with _Opened(source) as fh:
        chunks = list(_chunks(fh, format, geometry, 1 << 20, header))
    geometry = header[0] if header else (geometry or SensorGeometry())
    return EventStream.concat(chunks, geometry=geometry)


# --------------------------------------------------------------------------- writing


def encode_header(geometry: SensorGeometry) -> bytes:
    return HEADER.pack(MAGIC, VERSION, geometry.width, geometry.height, b"\0\0\0\0")


def encode_records(stream: EventStream, format: str = "binary") -> bytes:
    """Payload for ``stream`` without the binary header."""
    if format == "binary":
        rec = np.empty(len(stream), dtype=RECORD_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        return rec.tobytes()
    if format == "csv":
        if not len(stream):
            return b""
        buf = io.BytesIO()
        np.savetxt(buf, np.column_stack([stream.t, stream.x, stream.y, stream.p]), fmt="%d", delimiter=",", newline="\n")
        return buf.getvalue()
    raise ValueError(f"unknown event format {format!r}; choose from {FORMATS}")


def encode_events(stream: EventStream, format: str = "binary") -> bytes:
    head = encode_header(stream.geometry) if format == "binary" else b""
    return head + encode_records(stream, format)


class EventWriter:
    """Incremental writer; chunks must arrive in time order."""

    def __init__(self, sink, format: str = "binary", geometry: SensorGeometry | None = None):
        if format not in FORMATS:
            raise ValueError(f"unknown event format {format!r}; choose from {FORMATS}")
        self.format = format
        self.geometry = geometry or SensorGeometry()
        self._own = None
        if isinstance(sink, (str, os.PathLike)):
            sink = self._own = open(sink, "wb")
        self.sink = sink
        self.count = 0
        if format == "binary":
            self.sink.write(encode_header(self.geometry))

    def write(self, chunk: EventStream) -> None:
        self.sink.write(encode_records(chunk, self.format))
        self.count += len(chunk)

    def close(self) -> None:
        if self._own is not None:
            self._own.close()
            self._own = None
        else:
            self.sink.flush()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_events(stream: EventStream, sink=None, format: str = "binary") -> bytes | None:
    """Serialize ``stream``; returns the bytes when ``sink`` is None."""
    if sink is None:
        return encode_events(stream, format)
    with EventWriter(sink, format, stream.geometry) as w:
        w.write(stream)
    return None
