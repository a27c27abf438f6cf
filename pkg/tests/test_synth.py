import numpy as np
import pytest

from propseg.boxes import FrameSize
from propseg.errors import ConfigError, DatasetError
from propseg.masks import mask_tight_box
from propseg.synth import (
    EventRates,
    generate_video,
    make_manifest,
    read_dataset,
    write_dataset,
)

SIZE = FrameSize(64, 64)


def assert_videos_equal(a, b):
    assert a.video_id == b.video_id
    assert a.name == b.name
    assert a.size == b.size
    assert len(a.frames) == len(b.frames)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa, fb)
    for anns_a, anns_b in zip(a.annotations, b.annotations):
        assert len(anns_a) == len(anns_b)
        for xa, xb in zip(anns_a, anns_b):
            assert xa.instance_id == xb.instance_id
            assert xa.category_id == xb.category_id
            assert xa.box == xb.box
            assert np.array_equal(xa.mask, xb.mask)
    assert a.tracks == b.tracks


def test_determinism():
    kwargs = dict(num_frames=8, frame_size=SIZE, max_instances=3,
                  event_rates=EventRates(0.2, 0.1, 0.2), seed=11)
    assert_videos_equal(generate_video(**kwargs), generate_video(**kwargs))


def test_static_single_instance():
    v = generate_video(6, SIZE, 1, EventRates(), seed=2, max_speed=0.0)
    assert len(v.tracks) == 1
    first = v.annotations[0][0]
    for anns in v.annotations:
        assert len(anns) == 1
        assert anns[0].box == first.box


def test_birth_events_produce_late_tracks():
    v = generate_video(30, SIZE, 4, EventRates(birth=0.35), seed=5)
    first_seen = {}
    for fidx, anns in enumerate(v.annotations):
        for ann in anns:
            first_seen.setdefault(ann.instance_id, fidx)
    assert any(f > 0 for f in first_seen.values())


def test_anchor_spans_video_and_masks_disjoint():
    v = generate_video(14, SIZE, 3, EventRates(0.25, 0.2, 0.3), seed=9)
    for anns in v.annotations:
        ids = [a.instance_id for a in anns]
        assert 0 in ids  # anchor is topmost, never fully occluded
        stack = np.zeros((SIZE.height, SIZE.width), dtype=int)
        for a in anns:
            stack += a.mask.astype(int)
        assert stack.max() <= 1  # pixel sets disjoint


def test_boxes_are_tight():
    v = generate_video(10, SIZE, 3, EventRates(0.2, 0.1, 0.4), seed=21)
    for anns in v.annotations:
        for a in anns:
            assert mask_tight_box(a.mask) == a.box


def test_instance_ids_never_recycle():
    v = generate_video(25, SIZE, 3, EventRates(0.3, 0.3, 0.0), seed=3)
    ids = [t.instance_id for t in v.tracks]
    assert ids == sorted(set(ids))
    for t in v.tracks:
        assert 0 <= t.first_frame <= t.last_frame < v.num_frames
        assert all(p.size > 0 for p in t.points)
        assert len(t.points) == t.last_frame - t.first_frame + 1


def test_impossible_configuration():
    with pytest.raises(ConfigError):
        generate_video(5, FrameSize(8, 8), 1, EventRates(), seed=0)
    with pytest.raises(ConfigError):
        generate_video(0, SIZE, 1, EventRates(), seed=0)
    with pytest.raises(ConfigError):
        generate_video(5, SIZE, 0, EventRates(), seed=0)


def test_round_trip(tmp_path):
    videos = [
        generate_video(3, SIZE, 2, EventRates(0.2, 0.0, 0.1), seed=s, video_id=i,
                       name=f"video_{i:04d}")
        for i, s in enumerate((7, 8))
    ]
    manifest = make_manifest(videos, seed=7, split="test")
    write_dataset(videos, manifest, tmp_path)
    loaded, loaded_manifest = read_dataset(tmp_path)
    assert loaded_manifest.seed == manifest.seed
    assert loaded_manifest.split == "test"
    assert loaded_manifest.categories == manifest.categories
    assert len(loaded) == 2
    for a, b in zip(videos, loaded):
        assert_videos_equal(a, b)


def test_read_empty_directory(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_read_corrupt_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)
