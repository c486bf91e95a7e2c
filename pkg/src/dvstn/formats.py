"""Binary file formats: DVSW weights, DVSF frame clips, DVSE event streams.

All integers and reals are little-endian.

DVSW::

    b"DVSW"  u16 version  u32 layer_count
    per layer:  u16 name_len  utf-8 name  u8 array_count
    per array:  u8 role_tag  u8 rank  u32 extent * rank  f32 * prod(extents)

DVSF::

    b"DVSF"  u16 version  u16 width  u16 height  u32 frame_count
    per frame:  u64 timestamp_us  u8 * (height * width), row-major

DVSE::

    b"DVSE"  u16 version  u16 width  u16 height  u32 record_count
    per record (13 bytes, packed):  u64 t_us  u16 x  u16 y  u8 polarity
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .graph import ROLES, WeightStore, check_weights
from .pipeline.events import EVENT_DTYPE, EventFrame

WEIGHTS_MAGIC = b"DVSW"
FRAMES_MAGIC = b"DVSF"
EVENTS_MAGIC = b"DVSE"
VERSION = 1

ROLE_TAGS = {role: i + 1 for i, role in enumerate(ROLES)}
TAG_ROLES = {v: k for k, v in ROLE_TAGS.items()}


class _Reader:
    def __init__(self, stream, source):
        self.stream = stream
        self.source = source

    def read(self, n):
        data = self.stream.read(n)
        if len(data) != n:
            raise FormatError(f"{self.source}: truncated (wanted {n} bytes, got {len(data)})")
        return data

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _open_read(path_or_file):
    if hasattr(path_or_file, "read"):
        return path_or_file, getattr(path_or_file, "name", "<stream>"), False
    return open(path_or_file, "rb"), str(path_or_file), True


def _header(r, magic):
    got = r.read(4)
    if got != magic:
        raise FormatError(f"{r.source}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"{r.source}: unsupported version {version}")


# --- weights -----------------------------------------------------------------

def save_weights(weights, path):
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(weights)))
    for lid, roles in weights.items():
        name = lid.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", len(roles)))
        for role, arr in roles.items():
            arr = np.asarray(arr, dtype="<f4")
            buf.write(struct.pack("<BB", ROLE_TAGS[role], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path, spec=None):
    """Read a DVSW file; with ``spec`` the arrays are also checked against it."""
    f, source, owned = _open_read(path)
    try:
        r = _Reader(f, source)
        _header(r, WEIGHTS_MAGIC)
        (n_layers,) = r.unpack("<I")
        arrays = {}
        for _ in range(n_layers):
            (n,) = r.unpack("<H")
            try:
                lid = r.read(n).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{source}: layer name is not UTF-8") from exc
            (n_arrays,) = r.unpack("<B")
            roles = {}
            for _ in range(n_arrays):
                tag, rank = r.unpack("<BB")
                if tag not in TAG_ROLES:
                    raise FormatError(f"{source}: unknown role tag {tag} in layer {lid!r}")
                shape = r.unpack(f"<{rank}I") if rank else ()
                count = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(r.read(4 * count), dtype="<f4").reshape(shape)
                roles[TAG_ROLES[tag]] = data.astype(np.float32)
            arrays[lid] = roles
        if f.read(1):
            raise FormatError(f"{source}: trailing bytes after last layer")
    finally:
        if owned:
            f.close()
    store = WeightStore(arrays)
    if spec is not None:
        check_weights(spec, store)
    return store


# --- frames ------------------------------------------------------------------

def write_frames(path_or_file, frames):
    frames = list(frames)
    if not frames:
        raise FormatError("refusing to write an empty clip")
    h, w = frames[0].pixels.shape
    out = [FRAMES_MAGIC, struct.pack("<HHHI", VERSION, w, h, len(frames))]
    for fr in frames:
        if fr.pixels.shape != (h, w):
            raise FormatError(f"frame of shape {fr.pixels.shape} in a {h}x{w} clip")
        out.append(struct.pack("<Q", int(fr.timestamp)))
        out.append(np.ascontiguousarray(fr.pixels, dtype=np.uint8).tobytes())
    data = b"".join(out)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        Path(path_or_file).write_bytes(data)


def iter_frames(path_or_file):
    """Yield frames one at a time (works on pipes such as stdin)."""
    f, source, owned = _open_read(path_or_file)
    try:
        r = _Reader(f, source)
        _header(r, FRAMES_MAGIC)
        w, h, n = r.unpack("<HHI")
        for _ in range(n):
            (ts,) = r.unpack("<Q")
            pixels = np.frombuffer(r.read(w * h), dtype=np.uint8).reshape(h, w).copy()
            yield EventFrame(pixels, ts)
    finally:
        if owned:
            f.close()


def read_frames(path_or_file):
    return list(iter_frames(path_or_file))


def read_frames_header(path):
    with open(path, "rb") as f:
        r = _Reader(f, str(path))
        _header(r, FRAMES_MAGIC)
        w, h, n = r.unpack("<HHI")
    return w, h, n


# --- events ------------------------------------------------------------------

def write_events(path, events, width, height):
    ev = np.asarray(events, dtype=EVENT_DTYPE)
    data = EVENTS_MAGIC + struct.pack("<HHHI", VERSION, width, height, ev.size) + ev.tobytes()
    Path(path).write_bytes(data)


def read_events(path):
    """Returns ``(events, width, height)``."""
    f, source, owned = _open_read(path)
    try:
        r = _Reader(f, source)
        _header(r, EVENTS_MAGIC)
        w, h, n = r.unpack("<HHI")
        ev = np.frombuffer(r.read(n * EVENT_DTYPE.itemsize), dtype=EVENT_DTYPE).copy()
    finally:
        if owned:
            f.close()
    return ev, w, h
