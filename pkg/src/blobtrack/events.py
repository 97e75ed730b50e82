"""Event data model and stream I/O.

Events carry integer-microsecond timestamps, integer pixel coordinates,
and polarity +/-1.  Streams are stored either as a commented CSV or as a
packed little-endian binary format; both round-trip exactly.  Bulk
processing works on column arrays (see :class:`EventArray`); the
per-event :class:`Event` view is for construction and inspection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

BINARY_MAGIC = b"AEVT"
BINARY_VERSION = 1
_RECORD = struct.Struct("<QHHbI")  # t_us, x, y, polarity, label


class StreamFormatError(ValueError):
    """Raised for malformed event files; carries the offending position."""


@dataclass(frozen=True)
class Event:
    t: int  # microseconds since stream start
    x: int
    y: int
    polarity: int  # +1 or -1

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity}")


@dataclass(frozen=True)
class LabeledEvent:
    event: Event
    label: int  # 0 = background/noise, >=1 = object instance


@dataclass
class EventArray:
    """Column-array view of an event stream plus sensor geometry."""

    width: int
    height: int
    t: np.ndarray  # int64 microseconds
    x: np.ndarray  # int32
    y: np.ndarray  # int32
    polarity: np.ndarray  # int8
    label: Optional[np.ndarray] = None  # uint32, None for unlabelled streams

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self.t)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.polarity[i]))

    def iter_labeled(self) -> Iterator[LabeledEvent]:
        if self.label is None:
            raise ValueError("stream carries no labels")
        for i in range(len(self.t)):
            yield LabeledEvent(
                Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.polarity[i])),
                int(self.label[i]),
            )

    def validate(self, monotonic_tolerance_us: int = 0) -> None:
        """Check geometry bounds and timestamp ordering; raises on violation."""
        if len(self.t) == 0:
            return
        if self.x.min() < 0 or self.x.max() >= self.width:
            i = int(np.argmax((self.x < 0) | (self.x >= self.width)))
            raise StreamFormatError(f"record {i}: x={self.x[i]} outside [0, {self.width})")
        if self.y.min() < 0 or self.y.max() >= self.height:
            i = int(np.argmax((self.y < 0) | (self.y >= self.height)))
            raise StreamFormatError(f"record {i}: y={self.y[i]} outside [0, {self.height})")
        dt = np.diff(self.t)
        bad = np.nonzero(dt < -monotonic_tolerance_us)[0]
        if len(bad) > 0:
            i = int(bad[0])
            raise StreamFormatError(
                f"record {i + 1}: non-monotonic timestamp {self.t[i + 1]} after {self.t[i]}"
            )


def write_events_csv(path, events: EventArray) -> None:
    labelled = events.label is not None
    with open(path, "w") as f:
        f.write(f"# width={events.width} height={events.height}\n")
        if labelled:
            for i in range(len(events)):
                f.write(
                    f"{events.t[i]},{events.x[i]},{events.y[i]},{events.polarity[i]},{events.label[i]}\n"
                )
        else:
            for i in range(len(events)):
                f.write(f"{events.t[i]},{events.x[i]},{events.y[i]},{events.polarity[i]}\n")


def read_events_csv(path, monotonic_tolerance_us: int = 0) -> EventArray:
    path = Path(path)
    with open(path, "r") as f:
        header = f.readline().strip()
        if not header.startswith("#"):
            raise StreamFormatError(f"{path}:1: missing geometry header")
        try:
            fields = dict(kv.split("=") for kv in header.lstrip("# ").split())
            width, height = int(fields["width"]), int(fields["height"])
        except (ValueError, KeyError) as e:
            raise StreamFormatError(f"{path}:1: malformed geometry header: {header!r}") from e
        body = f.read()
    if not body.strip():
        return EventArray(width, height, *(np.empty(0, d) for d in (np.int64, np.int32, np.int32, np.int8)))
    try:
        data = np.genfromtxt(body.splitlines(), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise StreamFormatError(f"{path}: malformed record: {e}") from e
    if np.isnan(data).any():
        row = int(np.argmax(np.isnan(data).any(axis=1)))
        raise StreamFormatError(f"{path}:{row + 2}: malformed record")
    data = data.astype(np.int64)
    if data.shape[1] not in (4, 5):
        raise StreamFormatError(f"{path}: expected 4 or 5 columns, got {data.shape[1]}")
    pol = data[:, 3]
    bad = np.nonzero((pol != 1) & (pol != -1))[0]
    if len(bad) > 0:
        raise StreamFormatError(f"{path}:{bad[0] + 2}: invalid polarity {pol[bad[0]]}")
    arr = EventArray(
        width,
        height,
        data[:, 0].astype(np.int64),
        data[:, 1].astype(np.int32),
        data[:, 2].astype(np.int32),
        pol.astype(np.int8),
        data[:, 4].astype(np.uint32) if data.shape[1] == 5 else None,
    )
    arr.validate(monotonic_tolerance_us)
    return arr


def write_events_binary(path, events: EventArray) -> None:
    label = events.label if events.label is not None else np.zeros(len(events), dtype=np.uint32)
    with open(path, "wb") as f:
        f.write(BINARY_MAGIC)
        f.write(struct.pack("<HHH", BINARY_VERSION, events.width, events.height))
        rec = np.empty(
            len(events),
            dtype=np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("l", "<u4")]),
        )
        rec["t"] = events.t
        rec["x"] = events.x
        rec["y"] = events.y
        rec["p"] = events.polarity
        rec["l"] = label
        f.write(rec.tobytes())


def read_events_binary(path, monotonic_tolerance_us: int = 0) -> EventArray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BINARY_MAGIC:
            raise StreamFormatError(f"{path}: bad magic {magic!r}")
        version, width, height = struct.unpack("<HHH", f.read(6))
        if version != BINARY_VERSION:
            raise StreamFormatError(f"{path}: unsupported version {version}")
        payload = f.read()
    dtype = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("l", "<u4")])
    if len(payload) % dtype.itemsize != 0:
        raise StreamFormatError(f"{path}: truncated record at byte {10 + len(payload)}")
    rec = np.frombuffer(payload, dtype=dtype)
    pol = rec["p"].astype(np.int8)
    bad = np.nonzero((pol != 1) & (pol != -1))[0]
    if len(bad) > 0:
        raise StreamFormatError(f"{path}: record {bad[0]}: invalid polarity {pol[bad[0]]}")
    arr = EventArray(
        width,
        height,
        rec["t"].astype(np.int64),
        rec["x"].astype(np.int32),
        rec["y"].astype(np.int32),
        pol,
        rec["l"].astype(np.uint32),
    )
    arr.validate(monotonic_tolerance_us)
    return arr


def write_events(path, events: EventArray, fmt: Optional[str] = None) -> None:
    fmt = fmt or _sniff_format(path)
    if fmt == "csv":
        write_events_csv(path, events)
    elif fmt == "binary":
        write_events_binary(path, events)
    else:
        raise ValueError(f"unknown event format {fmt!r}")


def read_event_array(path, fmt: Optional[str] = None, monotonic_tolerance_us: int = 0) -> EventArray:
    fmt = fmt or _sniff_format(path)
    if fmt == "csv":
        return read_events_csv(path, monotonic_tolerance_us)
    if fmt == "binary":
        return read_events_binary(path, monotonic_tolerance_us)
    raise ValueError(f"unknown event format {fmt!r}")


def read_events(path, fmt: Optional[str] = None, monotonic_tolerance_us: int = 0) -> Iterator[Event]:
    """Timestamp-ordered event iterator over a stream file."""
    return iter(read_event_array(path, fmt, monotonic_tolerance_us))


def _sniff_format(path) -> str:
    p = Path(path)
    if p.suffix == ".csv":
        return "csv"
    if p.suffix in (".aevt", ".bin"):
        return "binary"
    # fall back to content sniffing for existing files
    if p.exists():
        with open(p, "rb") as f:
            return "binary" if f.read(4) == BINARY_MAGIC else "csv"
    raise ValueError(f"cannot infer event format from {p}")
