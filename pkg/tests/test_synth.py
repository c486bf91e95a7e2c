import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvstn.errors import DataError
from dvstn.formats import read_frames_header
from dvstn.pipeline import EventFrame
from dvstn.synth import (CLIP_FRAMES, DIRECTIONS, TABLE_COUNTS, ActionClass, ClipSpec, generate_clip,
                         generate_dataset, proportional_counts, read_manifest, rgb_diff_convert)

SMALL = dict(width=64, height=48)


def test_label_mapping_total():
    assert {a.value: a.label for a in ActionClass} == {
        "idle": 0, "lie": 0, "walk": 0, "sit": 0, "stand": 0, "fall": 1, "fake_fall": 0}


def test_clip_spec_validation():
    with pytest.raises(ValueError):
        ClipSpec("fall", direction="up")
    with pytest.raises(ValueError):
        ClipSpec("fall", length=40)
    with pytest.raises(ValueError):
        ClipSpec("dance")
    assert ClipSpec("fall").width == 640 and ClipSpec("fall").height == 480


def test_same_spec_bit_identical():
    spec = ClipSpec("fake_fall", seed=99, direction="left", **SMALL)
    a, b = generate_clip(spec), generate_clip(spec)
    assert a.frames == b.frames


@pytest.mark.parametrize("direction", DIRECTIONS)
@pytest.mark.parametrize("camera", [0, 1])
def test_fall_centroid_drops(direction, camera):
    for seed in range(6):
        clip = generate_clip(ClipSpec("fall", seed, direction, camera=camera, noise_rate=0, **SMALL))
        assert clip.centroids[49, 1] - clip.centroids[0, 1] >= 0.3 * 48


def test_fall_centroid_drops_at_sensor_size():
    clip = generate_clip(ClipSpec("fall", 3, "front", noise_rate=0))
    assert clip.centroids[49, 1] - clip.centroids[0, 1] >= 0.3 * 480


@pytest.mark.parametrize("direction", DIRECTIONS)
def test_idle_is_quiet(direction):
    clip = generate_clip(ClipSpec("idle", 4, direction, noise_rate=0, **SMALL))
    assert (clip.pixels > 0).mean(axis=(1, 2)).max() < 0.01


def test_idle_is_quiet_at_sensor_size():
    clip = generate_clip(ClipSpec("idle", 4, "right", noise_rate=0))
    assert (clip.pixels > 0).mean(axis=(1, 2)).max() < 0.01


def test_fake_fall_recovers():
    for d in DIRECTIONS:
        clip = generate_clip(ClipSpec("fake_fall", 8, d, noise_rate=0, **SMALL))
        drop = clip.centroids[:, 1] - clip.centroids[0, 1]
        assert abs(drop[-1]) < 0.05 * 48
        assert (clip.pixels > 0).any()


def test_walk_translates():
    clip = generate_clip(ClipSpec("walk", 2, "right", noise_rate=0, **SMALL))
    assert clip.centroids[-1, 0] > clip.centroids[0, 0] + 3


@settings(max_examples=10)
@given(action=st.sampled_from(list(ActionClass)), seed=st.integers(0, 2**63), direction=st.sampled_from(DIRECTIONS),
       camera=st.integers(0, 1), jitter=st.booleans())
def test_clip_shape_and_values(action, seed, direction, camera, jitter):
    clip = generate_clip(ClipSpec(action, seed, direction, 40, 30, camera=camera, jitter=jitter))
    assert len(clip.frames) == CLIP_FRAMES
    assert all(f.pixels.shape == (30, 40) for f in clip.frames)
    assert set(np.unique(clip.pixels)) <= {0, 255}
    assert [f.timestamp for f in clip.frames] == sorted(f.timestamp for f in clip.frames)


def test_fall_busier_than_idle_at_equal_noise():
    dens = {}
    for a in ("fall", "idle"):
        dens[a] = np.mean([(generate_clip(ClipSpec(a, s, d, **SMALL)).pixels > 0).mean()
                           for s in range(3) for d in DIRECTIONS])
    assert dens["fall"] > dens["idle"]


def test_noise_rate_is_respected():
    clip = generate_clip(ClipSpec("idle", 1, "front", 200, 150, noise_rate=0.05))
    assert (clip.pixels > 0).mean() == pytest.approx(0.05, rel=0.1)


# datasets

def test_dataset_counts_and_manifest(tmp_path):
    m = generate_dataset({"fall": 10, "walk": 10}, seed=1, out_dir=tmp_path, dims=(32, 24))
    assert len(m) == 20 and len(list((tmp_path / "train").glob("*.dvsf"))) == 20
    again = read_manifest(m.path)
    assert again.rows == m.rows
    assert sum(r.label for r in again.rows) == 10
    assert read_frames_header(again.clip_path(again.rows[0])) == (32, 24, 50)
    assert m.path.read_text().splitlines()[0] == "clip_id,path,split,action,label,direction,camera,seed"


def test_dataset_deterministic(tmp_path):
    a = generate_dataset({"sit": 3, "fall": 2}, 5, tmp_path / "a", dims=(32, 24))
    b = generate_dataset({"sit": 3, "fall": 2}, 5, tmp_path / "b", dims=(32, 24))
    assert a.path.read_text() == b.path.read_text()
    for ra, rb in zip(a.rows, b.rows):
        assert a.clip_path(ra).read_bytes() == b.clip_path(rb).read_bytes()


def test_train_test_disjoint(tiny_dataset):
    train, test = tiny_dataset
    assert not {r.clip_id for r in train.rows} & {r.clip_id for r in test.rows}
    assert not {r.seed for r in train.rows} & {r.seed for r in test.rows}
    assert all(r.label == 0 for r in train.rows + test.rows if r.action == "fake_fall")


def test_zero_counts_and_bad_manifest(tmp_path):
    m = generate_dataset({"fall": 0}, 1, tmp_path)
    assert len(m) == 0
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "bad.csv")


def test_desk_preset_proportions():
    train, test = proportional_counts(500), proportional_counts(100)
    assert sum(train.values()) == 500 and sum(test.values()) == 100
    assert train[ActionClass.FALL] == 150 and train[ActionClass.STAND] == 200
    assert test[ActionClass.FALL] == 30 and test[ActionClass.FAKE_FALL] == 13
    total = sum(TABLE_COUNTS.values())
    for a, n in TABLE_COUNTS.items():
        assert abs(train[a] - 500 * n / total) < 1


# rgb difference

def test_rgb_diff_static():
    out = rgb_diff_convert([np.full((4, 4), 80, np.uint8)] * 3, 20)
    assert len(out) == 2 and all(not f.pixels.any() for f in out)


def test_rgb_diff_single_pixel():
    a = np.zeros((4, 4), np.uint8)
    b = a.copy()
    b[1, 2] = 50
    (f,) = rgb_diff_convert([a, b], 20)
    assert f.pixels.sum() == 255 and f.pixels[1, 2] == 255


def test_rgb_diff_threshold_255(rng):
    seq = [rng.integers(0, 256, (5, 5), dtype=np.uint8) for _ in range(4)]
    assert all(not f.pixels.any() for f in rgb_diff_convert(seq, 255))


def test_rgb_diff_errors_and_timestamps():
    with pytest.raises(DataError):
        rgb_diff_convert([np.zeros((2, 2))], 10)
    with pytest.raises(DataError):
        rgb_diff_convert([np.zeros((2, 2)), np.zeros((3, 2))], 10)
    fr = [EventFrame(np.zeros((2, 2), np.uint8), t) for t in (5, 9, 14)]
    assert [f.timestamp for f in rgb_diff_convert(fr, 1)] == [9, 14]
