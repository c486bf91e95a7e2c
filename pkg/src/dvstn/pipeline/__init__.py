"""Streaming front-end: events -> frames -> 50-frame window -> 3 segments -> decision."""

from .events import (
    DEFAULT_INTERVAL_US,
    EVENT_DTYPE,
    AccumulationStats,
    EventFrame,
    EventRecord,
    accumulate_events,
    events_array,
)
from .resize import resize_area, resize_bilinear
from .stream import (
    Alert,
    BoundedFrameQueue,
    StreamDetector,
    StreamStats,
    TcpSink,
    expected_detections,
    stream_detector,
)
from .window import (
    FALL_CLASS,
    LABELS,
    SEGMENT_FRAMES,
    SEGMENT_OFFSETS,
    WINDOW_FRAMES,
    Detection,
    FrameWindow,
    SegmentStack,
    classify_window,
    consensus,
    extract_segments,
)

__all__ = [
    "DEFAULT_INTERVAL_US", "EVENT_DTYPE", "AccumulationStats", "EventFrame", "EventRecord",
    "accumulate_events", "events_array", "resize_area", "resize_bilinear", "Alert",
    "BoundedFrameQueue", "StreamDetector", "StreamStats", "TcpSink", "expected_detections",
    "stream_detector", "FALL_CLASS", "LABELS", "SEGMENT_FRAMES", "SEGMENT_OFFSETS",
    "WINDOW_FRAMES", "Detection", "FrameWindow", "SegmentStack", "classify_window",
    "consensus", "extract_segments",
]
