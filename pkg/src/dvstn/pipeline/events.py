"""Event records and their accumulation into 1-channel frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import DataError

log = logging.getLogger(__name__)

SENSOR_WIDTH = 640
SENSOR_HEIGHT = 480
DEFAULT_INTERVAL_US = 33_333

# packed on disk and in memory: timestamp (us), x, y, polarity (1 = on)
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


@dataclass(frozen=True)
class EventRecord:
    timestamp: int
    x: int
    y: int
    polarity: bool = True


def events_array(records):
    """Pack an iterable of :class:`EventRecord` (or tuples) into ``EVENT_DTYPE``."""
    if isinstance(records, np.ndarray) and records.dtype == EVENT_DTYPE:
        return records
    rows = [(r.timestamp, r.x, r.y, int(r.polarity)) if isinstance(r, EventRecord) else tuple(r)
            for r in records]
    return np.array(rows, dtype=EVENT_DTYPE)


@dataclass
class EventFrame:
    """One accumulation interval: 8-bit activity per pixel, stamped at the interval end."""

    pixels: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise DataError(f"frame must be a non-empty 2-D array, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            if self.pixels.min(initial=0) < 0 or self.pixels.max(initial=0) > 255:
                raise DataError("frame pixels must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def __eq__(self, other):
        return (isinstance(other, EventFrame) and self.timestamp == other.timestamp
                and np.array_equal(self.pixels, other.pixels))


@dataclass
class AccumulationStats:
    frames: int = 0
    events: int = 0
    dropped: int = 0


def accumulate_events(events, interval_us=DEFAULT_INTERVAL_US, width=SENSOR_WIDTH, height=SENSOR_HEIGHT,
                      gain=255, polarity=None, start_us=0, end_us=None, stats=None):
    """Bin events into frames of ``interval_us`` starting at ``start_us``.

    Frame k covers [start + k*interval, start + (k+1)*interval) and its pixel
    value is min(255, count * gain); the default gain saturates on the first
    event.  ``polarity`` keeps only "on" or "off" events; None counts both.
    Out-of-range coordinates are dropped and counted in ``stats.dropped``.
    """
    ev = events_array(events)
    stats = AccumulationStats() if stats is None else stats
    if ev.size and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
        raise DataError("event timestamps must be non-decreasing")
    if ev.size and int(ev["t"][0]) < start_us:
        raise DataError("events precede the accumulation start time")
    inside = (ev["x"] < width) & (ev["y"] < height)
    dropped = int((~inside).sum())
    if dropped:
        log.debug("dropped %d out-of-range events", dropped)
    stats.dropped += dropped
    ev = ev[inside]
    if polarity is not None:
        ev = ev[ev["p"] == (1 if polarity in ("on", 1, True) else 0)]
    idx = (ev["t"].astype(np.int64) - start_us) // interval_us
    if end_us is not None:
        n_frames = max(0, -(-(end_us - start_us) // interval_us))
        keep = idx < n_frames
        ev, idx = ev[keep], idx[keep]
    else:
        n_frames = int(idx.max()) + 1 if idx.size else 0
    counts = np.zeros((n_frames, height, width), dtype=np.int64)
    np.add.at(counts, (idx, ev["y"].astype(np.int64), ev["x"].astype(np.int64)), 1)
    pixels = np.minimum(255, counts * gain).astype(np.uint8)
    stats.frames += n_frames
    stats.events += int(ev.size)
    return [EventFrame(pixels[k], start_us + (k + 1) * interval_us) for k in range(n_frames)]
