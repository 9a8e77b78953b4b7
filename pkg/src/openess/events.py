"""Event streams, fixed-count windowing and dense event representations."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

EVENT_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")]
)
_HEADER = struct.Struct("<4sIIQ")
MAGIC = b"EVT1"
TEXT_MAGIC = "EVT1t"

DEFAULT_BINS = 5


class EventFormatError(ValueError):
    pass


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, EVENT_DTYPE))

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        validate_events(self.events, self.width, self.height)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def t(self) -> np.ndarray:
        return self.events["t"]

    @property
    def x(self) -> np.ndarray:
        return self.events["x"]

    @property
    def y(self) -> np.ndarray:
        return self.events["y"]

    @property
    def p(self) -> np.ndarray:
        return self.events["p"]

    @classmethod
    def from_arrays(cls, width, height, t, x, y, p) -> "EventStream":
        ev = np.zeros(len(t), EVENT_DTYPE)
        ev["t"] = t
        ev["x"] = x
        ev["y"] = y
        ev["p"] = p
        return cls(width, height, ev)


@dataclass
class EventWindow:
    """Contiguous slice ``[start, stop)`` of a stream.

    ``t0`` and ``dt`` default to the first timestamp and the span of the
    slice. A zero span becomes 1 us so every event lands on ``t* = 0``.
    """

    stream: EventStream
    start: int
    stop: int
    t0: int | None = None
    dt: int | None = None

    def __post_init__(self):
        if not 0 <= self.start < self.stop <= len(self.stream):
            raise ValueError("window must be a non-empty slice of the stream")
        ts = self.events["t"]
        if self.t0 is None:
            self.t0 = int(ts[0])
        if self.dt is None:
            self.dt = int(ts[-1]) - self.t0
        if self.dt <= 0:
            self.dt = 1

    @property
    def events(self) -> np.ndarray:
        return self.stream.events[self.start:self.stop]

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def width(self) -> int:
        return self.stream.width

    @property
    def height(self) -> int:
        return self.stream.height


@dataclass
class VoxelGrid:
    values: np.ndarray  # (B, H, W) float64
    dropped: int = 0  # events whose normalized time fell outside [0, B-1]

    @property
    def bins(self) -> int:
        return self.values.shape[0]


@dataclass
class SpikeTensor:
    spikes: np.ndarray  # (T, H, W) uint8

    @property
    def steps(self) -> int:
        return self.spikes.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.spikes.sum(axis=0, dtype=np.int64)


def validate_events(events: np.ndarray, width: int, height: int) -> None:
    if width <= 0 or height <= 0:
        raise EventFormatError(f"invalid sensor size {width}x{height}")
    if len(events) == 0:
        return
    if np.any(np.diff(events["t"].astype(np.int64)) < 0):
        raise EventFormatError("non-monotone timestamps")
    if np.any(events["x"] >= width) or np.any(events["y"] >= height):
        raise EventFormatError("coordinate out of range")
    p = events["p"]
    if np.any((p != 1) & (p != -1)):
        raise EventFormatError("polarity not in {-1,+1}")


def parse_event_stream(source: Union[bytes, BinaryIO]) -> EventStream:
    """Read an EVT1 stream, binary or the ``EVT1t`` text variant."""
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    data = bytes(data)
    if data.startswith(TEXT_MAGIC.encode()):
        return _parse_text(data.decode("utf-8"))
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise EventFormatError("malformed header")
    _, width, height, n = _HEADER.unpack_from(data)
    payload = data[_HEADER.size:]
    if len(payload) != n * EVENT_DTYPE.itemsize:
        raise EventFormatError(
            f"malformed header: declared {n} events, payload holds "
            f"{len(payload) / EVENT_DTYPE.itemsize:g}"
        )
    events = np.frombuffer(payload, dtype=EVENT_DTYPE, count=n).copy()
    return EventStream(width, height, events)


def _parse_text(text: str) -> EventStream:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    head = lines[0].split()
    if len(head) != 3 or head[0] != TEXT_MAGIC:
        raise EventFormatError("malformed header")
    try:
        width, height = int(head[1]), int(head[2])
    except ValueError as exc:
        raise EventFormatError("malformed header") from exc
    rows = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 4:
            raise EventFormatError(f"malformed record: {ln!r}")
        t, x, y, p = (int(v) for v in parts)
        if x < 0 or y < 0 or x >= width or y >= height:
            raise EventFormatError("coordinate out of range")
        rows.append((t, x, y, p))
    if not rows:
        return EventStream(width, height)
    t, x, y, p = (np.array(c, dtype=np.int64) for c in zip(*rows))
    if np.any(t < 0):
        raise EventFormatError("negative timestamp")
    if np.any((p != 1) & (p != -1)):
        raise EventFormatError("polarity not in {-1,+1}")
    return EventStream.from_arrays(width, height, t, x, y, p)


def read_event_file(path) -> EventStream:
    return parse_event_stream(Path(path).read_bytes())


def dump_event_stream(stream: EventStream) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, stream.width, stream.height, len(stream)))
    buf.write(np.ascontiguousarray(stream.events, dtype=EVENT_DTYPE).tobytes())
    return buf.getvalue()


def write_event_file(path, stream: EventStream) -> None:
    Path(path).write_bytes(dump_event_stream(stream))


def window_events(stream: EventStream, n: int) -> list[EventWindow]:
    """Split into consecutive windows of exactly ``n`` events; the tail is dropped."""
    if n < 1:
        raise ValueError("events per window must be >= 1")
    return [EventWindow(stream, k * n, (k + 1) * n) for k in range(len(stream) // n)]


def temporal_weights(t_norm: np.ndarray, bins: int) -> np.ndarray:
    """Triangular kernel max(1 - |t* - b|, 0) for every bin, shape (N, B)."""
    b = np.arange(bins, dtype=np.float64)
    return np.maximum(1.0 - np.abs(np.asarray(t_norm, np.float64)[:, None] - b), 0.0)


def normalized_times(window: EventWindow, bins: int) -> np.ndarray:
    t = window.events["t"].astype(np.float64)
    return (bins - 1) * (t - float(window.t0)) / float(window.dt)


def build_voxel_grid(window: EventWindow, bins: int = DEFAULT_BINS,
                     height: int | None = None, width: int | None = None) -> VoxelGrid:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    height = window.height if height is None else height
    width = window.width if width is None else width
    ev = window.events
    xs = ev["x"].astype(np.int64)
    ys = ev["y"].astype(np.int64)
    if len(ev) and (xs.max() >= width or ys.max() >= height):
        raise EventFormatError("event coordinates outside the grid")
    ps = ev["p"].astype(np.float64)
    ts = normalized_times(window, bins)

    valid = (ts >= 0.0) & (ts <= bins - 1)
    dropped = int(np.count_nonzero(~valid))
    xs, ys, ps, ts = xs[valid], ys[valid], ps[valid], ts[valid]

    lower = np.floor(ts).astype(np.int64)
    frac = ts - lower
    pix = ys * width + xs
    plane = height * width
    # each event touches at most two bins: floor(t*) and floor(t*) + 1
    idx = np.concatenate([lower * plane + pix, (lower + 1) * plane + pix])
    val = np.concatenate([ps * (1.0 - frac), ps * frac])
    keep = (np.concatenate([lower, lower + 1]) < bins) & (val != 0.0)
    flat = np.bincount(idx[keep], weights=val[keep], minlength=bins * plane)
    return VoxelGrid(flat.reshape(bins, height, width), dropped)


def event_count_frame(window: EventWindow) -> np.ndarray:
    """Per-pixel event counts (polarity ignored), shape (H, W)."""
    ev = window.events
    idx = ev["y"].astype(np.int64) * window.width + ev["x"]
    counts = np.bincount(idx, minlength=window.height * window.width)
    return counts.reshape(window.height, window.width)


def rate_code(image: np.ndarray, steps: int, seed: int,
              s_min: float = 0.0, s_max: float = 1.0,
              inverted: bool = False) -> SpikeTensor:
    """Bernoulli rate coding of an intensity image.

    A pixel spikes at a step when a uniform draw from [s_min, s_max) falls
    below its value, so the firing rate is (v - s_min) / (s_max - s_min).
    ``inverted`` spikes when the draw is greater than the value instead.
    """
    image = np.asarray(image, dtype=np.float64)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not s_min < s_max:
        raise ValueError("s_min must be below s_max")
    if np.any(image < s_min) or np.any(image > s_max) or not np.all(np.isfinite(image)):
        raise ValueError(f"pixel value outside [{s_min}, {s_max}]")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(s_min, s_max, size=(steps,) + image.shape)
    fired = draws > image if inverted else draws < image
    return SpikeTensor(fired.astype(np.uint8))

