"""Address-event streams: parsing, serialization, binning, and augmentation.

An event stream is a time-sorted list of (t, x, y, polarity) records from an
event camera or a synthetic generator. Streams are converted to binary spike
frames (one frame per millisecond by default, multiple events per pixel and
polarity OR'ed into a single spike) before being fed to a network.

Two on-disk formats are supported:

* CSV: header line ``w,h``, then one ``t_us,x,y,p`` line per event, p in {0,1}.
* BIN: magic ``AERS``, u16 width, u16 height, u64 count, then ``count``
  little-endian records of (u64 t_us, u16 x, u16 y, u8 p).

Additional formats can be registered at runtime through ``EXTRA_PARSERS``;
the registry is empty by default.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyFile,
    MalformedRecord,
    NonmonotonicTimestampOverflow,
    SourceSmallerThanTarget,
    StreamShorterThanWindow,
)

ON = 1
OFF = 0

US_PER_MS = 1000
DEFAULT_DT_US = 1000

_U64_MAX = 2**64 - 1
_BIN_MAGIC = b"AERS"
_BIN_HEADER = struct.Struct("<4sHHQ")
_BIN_RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class EventFormat(enum.Enum):
    CSV_EVENTS = "csv"
    BIN_EVENTS = "bin"


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Time-sorted polarity events on a width x height pixel grid.

    ``duration`` is in microseconds and is at least max(t) + 1 for nonempty
    streams (0 for empty ones), so every event falls strictly inside
    [0, duration).
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    duration: int

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.p = np.asarray(self.p, dtype=np.uint8)

    @property
    def n_events(self) -> int:
        return int(self.t.size)

    def events(self) -> list[Event]:
        return [Event(int(t), int(x), int(y), int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.p)]

    def validate(self) -> None:
        """Check the stream invariants, raising MalformedRecord on violation."""
        if self.n_events == 0:
            return
        if np.any(self.x >= self.width) or np.any(self.y >= self.height):
            raise MalformedRecord("event coordinates outside sensor dimensions")
        if np.any(np.diff(self.t.astype(np.int64)) < 0):
            raise MalformedRecord("event timestamps decrease")
        if int(self.t[-1]) >= self.duration:
            raise MalformedRecord("duration does not cover all events")

    @classmethod
    def from_events(cls, width: int, height: int,
                    events: list[tuple[int, int, int, int]],
                    duration: int | None = None) -> "EventStream":
        arr = np.array(events, dtype=np.int64).reshape(-1, 4)
        t, x, y, p = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
        if duration is None:
            duration = int(t.max()) + 1 if len(t) else 0
        return cls(width, height, t, x, y, p, duration)

    @classmethod
    def empty(cls, width: int, height: int, duration: int = 0) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z, duration)


@dataclass
class SpikeFrameSequence:
    """Binary spike tensors, one per timestep, channel = polarity.

    frames has shape (n_steps, 2, height, width) with values in {0, 1}.
    """

    width: int
    height: int
    dt_us: int
    frames: np.ndarray = field(repr=False)

    @property
    def n_steps(self) -> int:
        return int(self.frames.shape[0])

    @property
    def channels(self) -> int:
        return int(self.frames.shape[1])


# Extension hook: map format names to callables bytes -> EventStream.
# Disabled by default (empty); populate to enable extra import formats.
EXTRA_PARSERS: dict[str, Callable[[bytes], EventStream]] = {}


def _check_timestamps(t: np.ndarray) -> None:
    if np.any(t < 0) or np.any(t > _U64_MAX):
        raise NonmonotonicTimestampOverflow("timestamp outside the u64 counter range")


def _sorted_stream(width: int, height: int, t: np.ndarray, x: np.ndarray,
                   y: np.ndarray, p: np.ndarray) -> EventStream:
    order = np.argsort(t, kind="stable")
    t, x, y, p = t[order], x[order], y[order], p[order]
    duration = int(t[-1]) + 1 if len(t) else 0
    stream = EventStream(width, height, t, x, y, p, duration)
    stream.validate()
    return stream


def _parse_csv(data: bytes) -> EventStream:
    text = data.decode("utf-8", errors="strict")
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise EmptyFile("no header line")
    header = lines[0].split(",")
    if len(header) != 2:
        raise MalformedRecord(f"header must be 'w,h', got {lines[0]!r}")
    try:
        width, height = int(header[0]), int(header[1])
    except ValueError as exc:
        raise MalformedRecord(f"non-integer header: {lines[0]!r}") from exc
    if width <= 0 or height <= 0:
        raise MalformedRecord("nonpositive sensor dimensions")

    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise MalformedRecord(f"expected 4 fields, got {len(parts)}: {ln!r}")
        try:
            rec = [int(v) for v in parts]
        except ValueError as exc:
            raise MalformedRecord(f"non-integer field in {ln!r}") from exc
        rows.append(rec)

    if not rows:
        return EventStream.empty(width, height)
    arr = np.array(rows, dtype=object)
    t = arr[:, 0].astype(object)
    if any(v < 0 or v > _U64_MAX for v in t):
        raise NonmonotonicTimestampOverflow("timestamp outside the u64 counter range")
    t = arr[:, 0].astype(np.uint64)
    x = arr[:, 1].astype(np.int64)
    y = arr[:, 2].astype(np.int64)
    p = arr[:, 3].astype(np.int64)
    if np.any((p != 0) & (p != 1)):
        raise MalformedRecord("polarity must be 0 or 1")
    if np.any(x < 0) or np.any(y < 0) or np.any(x >= width) or np.any(y >= height):
        raise MalformedRecord("coordinates outside sensor dimensions")
    return _sorted_stream(width, height, t, x.astype(np.uint16),
                          y.astype(np.uint16), p.astype(np.uint8))


def _parse_bin(data: bytes) -> EventStream:
    if len(data) == 0:
        raise EmptyFile("zero-byte input")
    if len(data) < _BIN_HEADER.size:
        raise MalformedRecord("truncated header")
    magic, width, height, count = _BIN_HEADER.unpack_from(data, 0)
    if magic != _BIN_MAGIC:
        raise MalformedRecord(f"bad magic {magic!r}")
    if width == 0 or height == 0:
        raise MalformedRecord("nonpositive sensor dimensions")
    body = data[_BIN_HEADER.size:]
    expected = count * _BIN_RECORD_DTYPE.itemsize
    if len(body) != expected:
        raise MalformedRecord(f"expected {expected} record bytes, got {len(body)}")
    if count == 0:
        return EventStream.empty(width, height)
    rec = np.frombuffer(body, dtype=_BIN_RECORD_DTYPE)
    if np.any(rec["p"] > 1):
        raise MalformedRecord("polarity must be 0 or 1")
    if np.any(rec["x"] >= width) or np.any(rec["y"] >= height):
        raise MalformedRecord("coordinates outside sensor dimensions")
    return _sorted_stream(width, height, rec["t"].copy(), rec["x"].copy(),
                          rec["y"].copy(), rec["p"].copy())


def parse_event_file(data: bytes, fmt: EventFormat | str = EventFormat.BIN_EVENTS) -> EventStream:
    """Parse bytes in the given format into a time-sorted EventStream.

    Out-of-order input is sorted stably; duration is set to max(t) + 1.
    """
    if isinstance(fmt, str):
        if fmt in EXTRA_PARSERS:
            return EXTRA_PARSERS[fmt](data)
        fmt = EventFormat(fmt)
    if fmt is EventFormat.CSV_EVENTS:
        return _parse_csv(data)
    return _parse_bin(data)


def serialize_events(stream: EventStream, fmt: EventFormat | str = EventFormat.BIN_EVENTS) -> bytes:
    """Serialize a stream to CSV or BIN bytes (inverse of parse_event_file)."""
    if isinstance(fmt, str):
        fmt = EventFormat(fmt)
    if fmt is EventFormat.CSV_EVENTS:
        buf = io.StringIO()
        buf.write(f"{stream.width},{stream.height}\n")
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            buf.write(f"{int(t)},{int(x)},{int(y)},{int(p)}\n")
        return buf.getvalue().encode("utf-8")
    out = bytearray()
    out += _BIN_HEADER.pack(_BIN_MAGIC, stream.width, stream.height, stream.n_events)
    rec = np.empty(stream.n_events, dtype=_BIN_RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    out += rec.tobytes()
    return bytes(out)


def load_event_file(path, fmt: EventFormat | str = EventFormat.BIN_EVENTS) -> EventStream:
    with open(path, "rb") as fh:
        return parse_event_file(fh.read(), fmt)


def save_event_file(stream: EventStream, path, fmt: EventFormat | str = EventFormat.BIN_EVENTS) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_events(stream, fmt))


def bin_events(stream: EventStream, dt_us: int = DEFAULT_DT_US,
               out_width: int | None = None, out_height: int | None = None) -> SpikeFrameSequence:
    """OR events into binary frames of dt_us per step.

    frame[k][c][y][x] = 1 iff at least one event of polarity c landed on
    (x, y) with t in [k*dt, (k+1)*dt). The stream dimensions must already
    equal the output dimensions; downscale first if they do not.
    """
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    out_width = stream.width if out_width is None else out_width
    out_height = stream.height if out_height is None else out_height
    if (stream.width, stream.height) != (out_width, out_height):
        raise DimensionMismatch(
            f"stream is {stream.width}x{stream.height}, requested {out_width}x{out_height}")
    n_steps = -(-stream.duration // dt_us)
    frames = np.zeros((n_steps, 2, out_height, out_width), dtype=np.uint8)
    if stream.n_events:
        k = (stream.t // np.uint64(dt_us)).astype(np.int64)
        frames[k, stream.p.astype(np.int64), stream.y.astype(np.int64),
               stream.x.astype(np.int64)] = 1
    return SpikeFrameSequence(out_width, out_height, dt_us, frames)


def expand_frames(frames: SpikeFrameSequence) -> EventStream:
    """Inverse-ish of bin_events: one event per active (step, c, y, x) cell,
    placed at the start of its bin. Binning the result reproduces frames."""
    k, c, y, x = np.nonzero(frames.frames)
    t = k.astype(np.int64) * frames.dt_us
    duration = frames.n_steps * frames.dt_us
    return EventStream(frames.width, frames.height, t, x, y, c, duration)


def downscale(stream: EventStream, target: int = 128) -> EventStream:
    """Center-crop to the largest centered square, then floor-map to target.

    Each surviving event maps to floor(coord * target / crop_size); events
    outside the crop are dropped. Timestamps and polarities are unchanged.
    With source dimensions already equal to target this is the identity.
    """
    size = min(stream.width, stream.height)
    if size < target:
        raise SourceSmallerThanTarget(
            f"source {stream.width}x{stream.height} smaller than target {target}")
    ox = (stream.width - size) // 2
    oy = (stream.height - size) // 2
    xs = stream.x.astype(np.int64) - ox
    ys = stream.y.astype(np.int64) - oy
    keep = (xs >= 0) & (xs < size) & (ys >= 0) & (ys < size)
    xm = xs[keep] * target // size
    ym = ys[keep] * target // size
    return EventStream(target, target, stream.t[keep], xm, ym, stream.p[keep],
                       stream.duration)


def transform_stream(stream: EventStream, dx: int, dy: int, angle_deg: float,
                     window_start: int, window_us: int) -> EventStream:
    """Deterministic core of augment: rotate, translate, window, rebase.

    Rotation is applied to real-valued coordinates about the frame center
    ((w-1)/2, (h-1)/2), rounded to nearest integer; the integer translation
    follows. Events landing off-frame are dropped; timestamps are cut to
    [window_start, window_start + window_us) and rebased to 0.
    """
    tt = stream.t.astype(np.int64)
    keep_t = (tt >= window_start) & (tt < window_start + window_us)
    t = tt[keep_t] - window_start
    x = stream.x[keep_t].astype(np.float64)
    y = stream.y[keep_t].astype(np.float64)
    p = stream.p[keep_t]

    cx = (stream.width - 1) / 2.0
    cy = (stream.height - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    ca, sa = np.cos(rad), np.sin(rad)
    xr = ca * (x - cx) - sa * (y - cy) + cx
    yr = sa * (x - cx) + ca * (y - cy) + cy
    xi = np.rint(xr).astype(np.int64) + dx
    yi = np.rint(yr).astype(np.int64) + dy

    keep = (xi >= 0) & (xi < stream.width) & (yi >= 0) & (yi < stream.height)
    return EventStream(stream.width, stream.height, t[keep], xi[keep], yi[keep],
                       p[keep], window_us)


def augment(stream: EventStream, rng: np.random.Generator,
            xy_jitter_max: int = 8, rot_jitter_max_deg: float = 10.0,
            window_ms: int = 1450) -> EventStream:
    """Apply one random jitter, one rotation, and one time window to a stream.

    A single integer (dx, dy) translation (uniform in [-max, max]), a single
    rotation about the frame center (uniform in [-max_deg, max_deg]), and one
    contiguous window of window_ms (uniform start) are drawn from rng, in
    that order, then applied by transform_stream.
    """
    window_us = window_ms * US_PER_MS
    if stream.duration < window_us:
        raise StreamShorterThanWindow(
            f"stream of {stream.duration} us shorter than window {window_us} us")
    dx = int(rng.integers(-xy_jitter_max, xy_jitter_max + 1))
    dy = int(rng.integers(-xy_jitter_max, xy_jitter_max + 1))
    angle = float(rng.uniform(-rot_jitter_max_deg, rot_jitter_max_deg))
    start = int(rng.integers(0, stream.duration - window_us + 1))
    return transform_stream(stream, dx, dy, angle, start, window_us)
