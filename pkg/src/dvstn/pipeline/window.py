"""The 50-frame analysis window, segment extraction and segmental consensus."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from ..errors import DataError, FormatError
from ..graph import CompiledModel, ModelSpec, compile_model
from ..tensor_ops import softmax
from .events import EventFrame
from .resize import resize_area, resize_bilinear

WINDOW_FRAMES = 50
SEGMENT_FRAMES = 10
SEGMENT_OFFSETS = (0, 20, 40)
SEGMENT_ROLES = ("front", "middle", "end")
FALL_CLASS = 1
LABELS = ("non_fall", "fall")


class FrameWindow:
    """Ring buffer of the newest ``capacity`` frames, oldest first.

    With ``side`` set, frames are resized (area interpolation by default) on
    push and stored as float32 planes in [0, 255].
    """

    def __init__(self, capacity=WINDOW_FRAMES, side=None, interpolation="area"):
        self.capacity = capacity
        self.side = side
        self.interpolation = interpolation
        self._frames = deque(maxlen=capacity)

    def push(self, frame, timestamp=None):
        if isinstance(frame, EventFrame):
            plane, ts = frame.pixels, frame.timestamp
        else:
            plane, ts = np.asarray(frame), timestamp
        ts = 0 if ts is None else int(ts)
        if self.side is not None and plane.shape != (self.side, self.side):
            resize = resize_area if self.interpolation == "area" else resize_bilinear
            plane = resize(plane, self.side)
        self._frames.append((ts, np.asarray(plane, dtype=np.float32)))

    def extend(self, frames):
        for f in frames:
            self.push(f)

    def clear(self):
        self._frames.clear()

    @property
    def fill(self):
        return len(self._frames)

    @property
    def is_full(self):
        return len(self._frames) == self.capacity

    @property
    def newest_timestamp(self):
        return self._frames[-1][0] if self._frames else None

    def planes(self):
        return [p for _, p in self._frames]

    def timestamps(self):
        return [t for t, _ in self._frames]

    def __len__(self):
        return len(self._frames)


@dataclass
class SegmentStack:
    tensor: np.ndarray  # (1, 10, S, S), float32 in [0, 1]
    role: str


def extract_segments(window, side=None, offsets=SEGMENT_OFFSETS, length=SEGMENT_FRAMES, center=False):
    """Front / middle / end stacks of ``length`` frames, or None until the window is full.

    Planes not already at ``side`` are area-resized here.  Values are
    normalized by 1/255; ``center`` additionally subtracts each stack's mean.
    """
    if not window.is_full:
        return None
    planes = window.planes()
    side = side or window.side or planes[0].shape[0]
    stacks = []
    for role, start in zip(SEGMENT_ROLES, offsets):
        chosen = planes[start:start + length]
        chosen = [p if p.shape == (side, side) else resize_area(p, side) for p in chosen]
        t = np.stack(chosen).astype(np.float32)[None] / np.float32(255.0)
        if center:
            t = t - t.mean()
        stacks.append(SegmentStack(t, role))
    return stacks


def consensus(logits, threshold=0.5, mode="logits"):
    """Fuse per-segment score pairs; returns ``(fall_probability, label)``.

    ``mode="logits"`` averages the logits and then applies softmax;
    ``mode="probs"`` averages per-segment softmax outputs.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(z).all():
        raise DataError("non-finite segment logits")
    if mode == "logits":
        prob = float(softmax(z.mean(axis=0))[FALL_CLASS])
    elif mode == "probs":
        prob = float(softmax(z, axis=1)[:, FALL_CLASS].mean())
    else:
        raise ValueError(f"unknown consensus mode {mode!r}")
    # an exact tie (e.g. all-zero logits) stays non_fall
    return prob, LABELS[int(prob > threshold)]


@dataclass
class Detection:
    window_end_timestamp: int
    fall_probability: float
    label: str
    segment_logits: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), np.float32))

    def to_record(self):
        pairs = "\t".join(f"{a:.6g},{b:.6g}" for a, b in np.asarray(self.segment_logits).reshape(-1, 2))
        return f"{format_timestamp(self.window_end_timestamp)}\t{self.fall_probability:.4f}\t{self.label}\t{pairs}"

    @classmethod
    def from_record(cls, line):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6 or parts[2] not in LABELS:
            raise FormatError(f"not a detection record: {line!r}")
        logits = np.array([[float(v) for v in p.split(",")] for p in parts[3:]], dtype=np.float32)
        return cls(parse_timestamp(parts[0]), float(parts[1]), parts[2], logits)


def format_timestamp(us):
    dt = datetime.fromtimestamp(us // 1_000_000, tz=timezone.utc).replace(microsecond=us % 1_000_000)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text):
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 1_000_000 + dt.microsecond


def as_compiled(model, weights=None):
    if isinstance(model, CompiledModel):
        return model
    if isinstance(model, ModelSpec):
        if weights is None:
            raise ValueError("a ModelSpec needs weights")
        return compile_model(model, weights)
    raise TypeError(f"expected a CompiledModel or ModelSpec, got {type(model).__name__}")


def segment_logits(stacks, model):
    """One forward call per segment; returns a (3, 2) float32 array."""
    return np.concatenate([model(s.tensor) for s in stacks], axis=0)


def classify_window(window, model, weights=None, threshold=0.5, mode="logits", center=False):
    """Classify a full window; stamps the newest frame's timestamp."""
    model = as_compiled(model, weights)
    side = model.spec.input_shape[1]
    stacks = extract_segments(window, side=side, center=center)
    if stacks is None:
        raise DataError(f"window holds {window.fill} of {window.capacity} frames")
    logits = segment_logits(stacks, model)
    prob, label = consensus(logits, threshold, mode)
    return Detection(window.newest_timestamp, prob, label, logits)
