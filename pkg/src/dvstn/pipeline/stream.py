"""Sliding-window fall detection over a frame stream."""

from __future__ import annotations

import logging
import queue
import socket
import threading
from collections import deque
from dataclasses import dataclass

from .window import WINDOW_FRAMES, FrameWindow, as_compiled, classify_window, format_timestamp

log = logging.getLogger(__name__)

DEFAULT_REFRACTORY_US = 2_000_000
QUEUE_DEPTH = 50


@dataclass
class Alert:
    timestamp: int
    fall_probability: float

    def to_record(self):
        return f"{format_timestamp(self.timestamp)}\tALERT\t{self.fall_probability:.4f}"


@dataclass
class StreamStats:
    frames: int = 0
    detections: int = 0
    alerts: int = 0
    dropped: int = 0


class BoundedFrameQueue:
    """Single-producer queue that evicts the oldest frame when full."""

    _CLOSED = object()

    def __init__(self, depth=QUEUE_DEPTH):
        self._items = deque()
        self._depth = depth
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def put(self, item):
        with self._cond:
            if len(self._items) >= self._depth:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self):
        """Next frame, or ``BoundedFrameQueue._CLOSED`` once drained and closed."""
        with self._cond:
            while not self._items and not self._closed:
                self._cond.wait()
            if self._items:
                return self._items.popleft()
            return self._CLOSED


class StreamDetector:
    """Owns the window; feed frames with :meth:`push`.

    After the window first fills, a detection is produced every ``stride``
    frames.  An :class:`Alert` accompanies a detection only on a
    non_fall -> fall transition, at most once per refractory period.
    """

    def __init__(self, model, weights=None, stride=1, threshold=0.5, refractory_us=DEFAULT_REFRACTORY_US,
                 mode="logits", interpolation="area"):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.model = as_compiled(model, weights)
        self.stride = stride
        self.threshold = threshold
        self.refractory_us = refractory_us
        self.mode = mode
        self.window = FrameWindow(WINDOW_FRAMES, side=self.model.spec.input_shape[1], interpolation=interpolation)
        self.stats = StreamStats()
        self._since_fill = None
        self._last_label = "non_fall"
        self._last_alert = None

    def push(self, frame):
        self.window.push(frame)
        self.stats.frames += 1
        if not self.window.is_full:
            return []
        self._since_fill = 0 if self._since_fill is None else self._since_fill + 1
        if self._since_fill % self.stride:
            return []
        det = classify_window(self.window, self.model, threshold=self.threshold, mode=self.mode)
        self.stats.detections += 1
        out = [det]
        if det.label == "fall" and self._last_label != "fall":
            ts = det.window_end_timestamp
            if self._last_alert is None or ts - self._last_alert >= self.refractory_us:
                self._last_alert = ts
                self.stats.alerts += 1
                out.append(Alert(ts, det.fall_probability))
        self._last_label = det.label
        return out


def expected_detections(frames, stride=1, window=WINDOW_FRAMES):
    return max(0, (frames - window) // stride + 1)


def stream_detector(source, model, weights=None, stride=1, threshold=0.5, refractory_us=DEFAULT_REFRACTORY_US,
                    threaded=False, queue_depth=QUEUE_DEPTH, stats=None, **kwargs):
    """Yield :class:`Detection` and :class:`Alert` records for a frame source.

    ``threaded=True`` runs acquisition on a producer thread feeding a bounded
    drop-oldest queue, as for a live sensor; lagging inference then loses
    frames (counted in ``stats.dropped``).  The default synchronous mode
    processes every frame, which is what file replay wants.
    """
    det = StreamDetector(model, weights, stride, threshold, refractory_us, **kwargs)
    if stats is not None:
        det.stats = stats
    if not threaded:
        for frame in source:
            yield from det.push(frame)
        return

    q = BoundedFrameQueue(queue_depth)
    failure = []

    def produce():
        try:
            for frame in source:
                q.put(frame)
        except Exception as exc:  # surfaced to the consumer below
            failure.append(exc)
        finally:
            q.close()

    producer = threading.Thread(target=produce, name="dvstn-acquire", daemon=True)
    producer.start()
    try:
        while True:
            frame = q.get()
            if frame is BoundedFrameQueue._CLOSED:
                break
            yield from det.push(frame)
    finally:
        det.stats.dropped = q.dropped
        producer.join(timeout=1.0)
    if failure:
        raise failure[0]


class TcpSink:
    """Best-effort newline-delimited record sink.

    Sending happens on a background thread through a bounded queue, so a slow
    or absent receiver never stalls detection.  Connection failure degrades to
    local logging with a warning.
    """

    def __init__(self, host, port, timeout=1.0, depth=1024):
        self.address = (host, int(port))
        self.timeout = timeout
        self.connected = False
        self.failed = False
        self._q = queue.Queue(maxsize=depth)
        self._thread = threading.Thread(target=self._run, name="dvstn-sink", daemon=True)
        self._thread.start()

    @classmethod
    def from_string(cls, text, **kwargs):
        host, _, port = text.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"sink must be host:port, got {text!r}")
        return cls(host, int(port), **kwargs)

    def _run(self):
        sock = None
        try:
            sock = socket.create_connection(self.address, timeout=self.timeout)
            self.connected = True
        except OSError as exc:
            self.failed = True
            log.warning("detection sink %s:%d unavailable (%s); logging locally", *self.address, exc)
        while True:
            line = self._q.get()
            if line is None:
                break
            if sock is None:
                log.info("%s", line)
                continue
            try:
                sock.sendall((line + "\n").encode())
            except OSError as exc:
                log.warning("detection sink lost (%s); logging locally", exc)
                self.failed = True
                sock.close()
                sock = None
                log.info("%s", line)
        if sock is not None:
            sock.close()

    def send(self, line):
        try:
            self._q.put_nowait(line)
        except queue.Full:
            log.warning("detection sink backlog full; record dropped")

    def close(self):
        self._q.put(None)
        self._thread.join(timeout=self.timeout + 1.0)
