"""Synthetic event-camera action clips.

An actor is a torso ellipse plus a round head, anchored at the feet.  Its
pose over time (feet position, in-plane tilt, apparent length, width) follows
a per-action parametric trajectory.  Events fire wherever the silhouette
changes between consecutive sub-steps, which is what a DVS sees when a
uniformly lit body moves against a static background.  Bernoulli noise is
added on top.  Every clip is a pure function of its :class:`ClipSpec`.
"""

from __future__ import annotations

import csv
import enum
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import write_frames
from .pipeline.events import DEFAULT_INTERVAL_US, SENSOR_HEIGHT, SENSOR_WIDTH, EventFrame

CLIP_FRAMES = 50
SUBSTEPS = 4
DIRECTIONS = ("front", "back", "left", "right")
DEFAULT_NOISE = 0.002
DESK_DIMS = (64, 48)
MANIFEST_FIELDS = ("clip_id", "path", "split", "action", "label", "direction", "camera", "seed")


class ActionClass(str, enum.Enum):
    IDLE = "idle"
    LIE = "lie"
    WALK = "walk"
    SIT = "sit"
    STAND = "stand"
    FALL = "fall"
    FAKE_FALL = "fake_fall"

    @property
    def label(self):
        """1 for a real fall; everything else, fake falls included, is 0."""
        return int(self is ActionClass.FALL)


# clip counts per action in the recorded dataset this generator imitates
TABLE_COUNTS = {
    ActionClass.IDLE: 62,
    ActionClass.LIE: 62,
    ActionClass.WALK: 62,
    ActionClass.SIT: 124,
    ActionClass.STAND: 744,
    ActionClass.FALL: 558,
    ActionClass.FAKE_FALL: 248,
}


@dataclass(frozen=True)
class ClipSpec:
    action: ActionClass
    seed: int = 0
    direction: str = "right"
    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT
    length: int = CLIP_FRAMES
    noise_rate: float = DEFAULT_NOISE
    camera: int = 0
    jitter: bool = False

    def __post_init__(self):
        object.__setattr__(self, "action", ActionClass(self.action))
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.length != CLIP_FRAMES:
            raise ValueError(f"clips are exactly {CLIP_FRAMES} frames long")
        if self.camera not in (0, 1):
            raise ValueError("camera must be 0 or 1")


@dataclass
class Clip:
    spec: ClipSpec
    frames: list
    centroids: np.ndarray  # (50, 2) actor centroid (x, y) in pixels, per frame end

    @property
    def pixels(self):
        return np.stack([f.pixels for f in self.frames])


# --- trajectories ------------------------------------------------------------

def _smooth(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _accel(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u


def _bump(u):
    """0 -> 1 -> 0 over u in [0, 1]."""
    return np.sin(np.pi * np.clip(u, 0.0, 1.0))


@dataclass
class _Pose:
    fx: np.ndarray   # feet x, fraction of width
    fy: np.ndarray   # feet y, fraction of height
    phi: np.ndarray  # tilt of the body axis from vertical, radians (+ leans right)
    lam: np.ndarray  # apparent body length as a fraction of the standing length
    wid: np.ndarray  # width multiplier


def _trajectory(spec, rng, t, body, aspect):
    """Pose arrays at (fractional) frame times ``t``."""
    a = spec.action
    side = {"right": 1.0, "left": -1.0}.get(spec.direction, 0.0)
    depth = spec.direction in ("front", "back")
    toward = spec.direction == "front"
    ones = np.ones_like(t)
    floor_y = rng.uniform(0.91, 0.94)
    # horizontal room a lying body needs, as a fraction of width
    reach = body * aspect * 1.05
    if side > 0:
        fx0 = rng.uniform(0.08, max(0.09, 0.96 - reach))
    elif side < 0:
        fx0 = rng.uniform(min(0.91, 0.04 + reach), 0.92)
    else:
        fx0 = rng.uniform(0.35, 0.65)
    lean = side if side else rng.choice((-1.0, 1.0))
    shift = int(rng.integers(-5, 6)) if spec.jitter else 0

    fx = fx0 * ones
    fy = floor_y * ones
    phi = np.zeros_like(t)
    lam = ones.copy()
    wid = ones.copy()

    if a is ActionClass.FALL:
        d = rng.uniform(15, 30)
        t0 = min(rng.uniform(5, 15) + shift, 48 - d)
        u = (t - t0) / d
        if depth:
            lam = 1 - 0.95 * _accel(u)
            wid = 1 + (0.8 if toward else 0.25) * _accel(u)
            phi = rng.uniform(-0.12, 0.12) * _accel(u)
        else:
            phi = side * (np.pi / 2) * _accel(u)
        # small stumble just before the fall
        phi = phi + lean * 0.06 * _bump((t - t0 + 4) / 4)
    elif a is ActionClass.FAKE_FALL:
        t0 = rng.uniform(5, 15) + shift
        rise, hold, back = rng.uniform(6, 10), rng.uniform(2, 4), rng.uniform(8, 14)
        u_up = _accel((t - t0) / rise)
        u_down = _smooth((t - t0 - rise - hold) / back)
        env = u_up * (1 - u_down)
        if depth:
            lam = 1 - rng.uniform(0.25, 0.4) * env
            wid = 1 + 0.2 * env
        else:
            phi = side * rng.uniform(0.35, 0.6) * env
            lam = 1 - 0.12 * env
    elif a is ActionClass.WALK:
        v = rng.uniform(0.35, 0.7) / CLIP_FRAMES
        period = rng.uniform(10, 16)
        if depth:
            grow = rng.uniform(0.12, 0.2) * (1 if toward else -1)
            scale = 1 + grow * t / CLIP_FRAMES
            lam, wid = scale.copy(), scale.copy()
            fy = fy + (0.04 if toward else -0.04) * t / CLIP_FRAMES
            fx = fx + rng.uniform(-0.1, 0.1) * t / CLIP_FRAMES
        else:
            fx = np.clip(fx0 + side * v * t, 0.05, 0.95)
        lam = lam * (1 - 0.025 * np.abs(np.sin(2 * np.pi * t / period)))
        phi = phi + 0.04 * np.sin(2 * np.pi * t / period)
    elif a is ActionClass.SIT:
        t0, d = rng.uniform(3, 12) + shift, rng.uniform(15, 25)
        u = (t - t0) / d
        lam = 1 - rng.uniform(0.32, 0.4) * _smooth(u)
        phi = lean * 0.15 * _bump(u)
    elif a is ActionClass.LIE:
        t0, d = rng.uniform(0, 5) + shift, rng.uniform(38, 45)
        u = (t - t0) / d
        first, second = _smooth(u / 0.4), _smooth((u - 0.4) / 0.6)
        if depth:
            lam = 1 - 0.35 * first - 0.6 * second
            wid = 1 + 0.3 * second
        else:
            lam = 1 - 0.35 * first + 0.25 * second
            phi = side * (np.pi / 2) * second
    elif a is ActionClass.STAND:
        t0, d = rng.uniform(3, 15) + shift, rng.uniform(15, 30)
        u = _smooth((t - t0) / d)
        if rng.random() < 0.5:
            # from lying
            if depth:
                lam = 0.05 + 0.95 * u
                wid = 1.3 - 0.3 * u
            else:
                phi = side * (np.pi / 2) * (1 - u)
        else:
            # from seated
            lam = 0.64 + 0.36 * u
            phi = lean * 0.15 * _bump(u)
    # IDLE: stationary, with sub-pixel breathing
    lam = lam * (1 + 0.002 * np.sin(2 * np.pi * t / 25.0))
    return _Pose(fx, fy, phi, lam, wid)


# --- rendering ---------------------------------------------------------------

class _Actor:
    def __init__(self, spec, rng):
        self.spec = spec
        self.W, self.H = spec.width, spec.height
        self.body = rng.uniform(0.76, 0.82)   # standing height, fraction of H
        self.girth = rng.uniform(0.10, 0.13)  # torso half-width / body length
        self.squash = 0.92 if spec.camera == 1 else 1.0
        self.floor = None

    def ellipses(self, pose, k):
        """Torso and head as (cx, cy, ux, uy, a, b) in world pixels."""
        L = self.body * self.H
        fx, fy = pose.fx[k] * self.W, pose.fy[k] * self.H
        phi, lam, wid = pose.phi[k], pose.lam[k], pose.wid[k]
        ux, uy = math.sin(phi), -math.cos(phi)
        r = 0.09 * L * math.sqrt(wid)
        lt = lam * (L - 2 * r)
        torso = (fx + ux * lt / 2, fy + uy * lt / 2, ux, uy, max(abs(lt) / 2, 0.5), self.girth * L * wid)
        hd = lam * (L - r)
        head = (fx + ux * hd, fy + uy * hd, ux, uy, r, r)
        return torso, head

    def to_pixels(self, x, y, floor):
        """World -> sensor coordinates for the selected camera."""
        if self.spec.camera == 1:
            x = self.W - 1 - x
            y = floor + (y - floor) * self.squash
        return x, y

    def silhouette(self, pose, k, floor, box):
        y0, y1, x0, x1 = box
        py, px = np.mgrid[y0:y1, x0:x1].astype(np.float64) + 0.5
        if self.spec.camera == 1:
            wx = self.W - px
            wy = floor + (py - floor) / self.squash
        else:
            wx, wy = px, py
        mask = np.zeros(py.shape, dtype=bool)
        for cx, cy, ux, uy, a, b in self.ellipses(pose, k):
            dx, dy = wx - cx, wy - cy
            p = dx * ux + dy * uy
            q = -dx * uy + dy * ux
            mask |= (p / a) ** 2 + (q / b) ** 2 <= 1.0
        return mask

    def bbox(self, pose, ks, floor):
        xs, ys = [], []
        for k in ks:
            for cx, cy, _, _, a, b in self.ellipses(pose, k):
                e = max(a, b) + 1
                for x, y in ((cx - e, cy - e), (cx + e, cy + e)):
                    x, y = self.to_pixels(x, y, floor)
                    xs.append(x)
                    ys.append(y)
        x0 = max(0, int(math.floor(min(xs))))
        x1 = min(self.W, int(math.ceil(max(xs))) + 1)
        y0 = max(0, int(math.floor(min(ys))))
        y1 = min(self.H, int(math.ceil(max(ys))) + 1)
        return y0, max(y0, y1), x0, max(x0, x1)

    def centroid(self, pose, k, floor):
        (tx, ty, _, _, ta, tb), (hx, hy, _, _, r, _) = self.ellipses(pose, k)
        wt, wh = ta * tb, r * r
        x = (tx * wt + hx * wh) / (wt + wh)
        y = (ty * wt + hy * wh) / (wt + wh)
        return self.to_pixels(x, y, floor)


def generate_clip(spec):
    """Render one 50-frame clip.  Bit-identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    actor = _Actor(spec, rng)
    W, H = spec.width, spec.height
    t = np.arange(spec.length * SUBSTEPS + 1, dtype=np.float64) / SUBSTEPS
    pose = _trajectory(spec, rng, t, actor.body, H / W)
    floor = float(pose.fy[0] * H)
    noise_rng = np.random.default_rng(rng.integers(0, 2**63))

    frames, centroids = [], []
    for f in range(spec.length):
        ks = range(f * SUBSTEPS, (f + 1) * SUBSTEPS + 1)
        active = np.zeros((H, W), dtype=bool)
        y0, y1, x0, x1 = actor.bbox(pose, ks, floor)
        if y1 > y0 and x1 > x0:
            prev = actor.silhouette(pose, ks[0], floor, (y0, y1, x0, x1))
            for k in ks[1:]:
                cur = actor.silhouette(pose, k, floor, (y0, y1, x0, x1))
                active[y0:y1, x0:x1] |= prev ^ cur
                prev = cur
        if spec.noise_rate > 0:
            active |= noise_rng.random((H, W)) < spec.noise_rate
        pixels = np.where(active, 255, 0).astype(np.uint8)
        frames.append(EventFrame(pixels, (f + 1) * DEFAULT_INTERVAL_US))
        centroids.append(actor.centroid(pose, ks[-1], floor))
    return Clip(spec, frames, np.asarray(centroids))


def rgb_diff_convert(frames, threshold=20):
    """Binary temporal-difference frames from an 8-bit grayscale sequence.

    Output frame t is 255 where |frame[t+1] - frame[t]| > threshold; one frame
    shorter than the input.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise DataError("need at least two frames")
    planes, stamps = [], []
    for i, fr in enumerate(frames):
        if isinstance(fr, EventFrame):
            planes.append(fr.pixels.astype(np.int16))
            stamps.append(fr.timestamp)
        else:
            planes.append(np.asarray(fr).astype(np.int16))
            stamps.append((i + 1) * DEFAULT_INTERVAL_US)
    shape = planes[0].shape
    if any(p.shape != shape for p in planes):
        raise DataError("frames differ in size")
    return [EventFrame(np.where(np.abs(planes[i] - planes[i - 1]) > threshold, 255, 0).astype(np.uint8),
                       stamps[i]) for i in range(1, len(planes))]


# --- datasets ----------------------------------------------------------------

def proportional_counts(total, table=TABLE_COUNTS):
    """Scale the per-action table to ``total`` clips (largest remainder, table order on ties)."""
    n = sum(table.values())
    exact = {a: Fraction(c * total, n) for a, c in table.items()}
    counts = {a: int(math.floor(v)) for a, v in exact.items()}
    left = total - sum(counts.values())
    order = sorted(table, key=lambda a: -(exact[a] - counts[a]))
    for a in order[:left]:
        counts[a] += 1
    return counts


@dataclass
class ManifestRow:
    clip_id: str
    path: str
    split: str
    action: str
    label: int
    direction: str
    camera: int
    seed: int


@dataclass
class Manifest:
    path: Path
    rows: list = field(default_factory=list)

    def clip_path(self, row):
        return self.path.parent / row.path

    def __len__(self):
        return len(self.rows)


def write_manifest(path, rows):
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.clip_id, r.path, r.split, r.action, r.label, r.direction, r.camera, r.seed])
    return Manifest(path, list(rows))


def read_manifest(path):
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
        rows = [ManifestRow(r["clip_id"], r["path"], r["split"], r["action"], int(r["label"]),
                            r["direction"], int(r["camera"]), int(r["seed"])) for r in reader]
    return Manifest(path, rows)


_SPLIT_CODES = {"train": 1, "test": 2}


def generate_dataset(counts, seed, out_dir, split="train", dims=DESK_DIMS, noise_rate=DEFAULT_NOISE,
                     jitter=False):
    """Render ``counts[action]`` clips per action into ``out_dir`` with a manifest.

    Clip seeds derive from (seed, split, index), so train and test never share
    a clip.  Returns the written :class:`Manifest`.
    """
    out_dir = Path(out_dir)
    clip_dir = out_dir / split
    clip_dir.mkdir(parents=True, exist_ok=True)
    width, height = dims
    code = _SPLIT_CODES.get(split, 3)
    rows, index = [], 0
    for action, n in counts.items():
        action = ActionClass(action)
        for i in range(int(n)):
            ss = np.random.SeedSequence([int(seed), code, index])
            clip_seed = int(ss.generate_state(1, dtype=np.uint64)[0])
            camera = int(ss.generate_state(2)[1] % 2)
            direction = DIRECTIONS[i % len(DIRECTIONS)]
            spec = ClipSpec(action, clip_seed, direction, width, height, noise_rate=noise_rate,
                            camera=camera, jitter=jitter)
            clip_id = f"{split}_{index:05d}_{action.value}"
            rel = f"{split}/{clip_id}.dvsf"
            write_frames(out_dir / rel, generate_clip(spec).frames)
            rows.append(ManifestRow(clip_id, rel, split, action.value, action.label, direction, camera,
                                    clip_seed))
            index += 1
    return write_manifest(out_dir / f"{split}_manifest.csv", rows)


PRESETS = {
    "desk": {"train": 500, "test": 100, "dims": DESK_DIMS},
    "tiny": {"train": 28, "test": 14, "dims": DESK_DIMS},
}


def generate_preset(out_dir, preset="desk", seed=0, noise_rate=DEFAULT_NOISE, jitter=False):
    """Train and test splits in the action-table proportions.  Returns (train, test) manifests."""
    p = PRESETS[preset]
    train = generate_dataset(proportional_counts(p["train"]), seed, out_dir, "train", p["dims"],
                             noise_rate, jitter)
    test = generate_dataset(proportional_counts(p["test"]), seed, out_dir, "test", p["dims"],
                            noise_rate, jitter)
    return train, test
