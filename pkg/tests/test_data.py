from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivlab.data import (COLORS, DataError, DatasetSpec, SyntheticWorldSpec, VideoClip, Vocab, build_hybrid,
                        cotrain_schedule, gen_corpus, gen_xor_corpus, image_view, load_dataset,
                        merge_label_spaces, multi_scale_crop, relabel_by_meta, repeated_sampling,
                        resize_bilinear, sample_clip, save_dataset, split_video)


def indexed_video(n, vid="v"):
    # frame t holds the value t everywhere, so sampled indices can be read back
    return VideoClip(np.arange(n, dtype=float).reshape(n, 1, 1, 1) * np.ones((1, 2, 2, 1)), vid)


def frame_ids(clip):
    return clip.frames[:, 0, 0, 0].astype(int).tolist()


def test_corpus_is_deterministic():
    a = gen_corpus(SyntheticWorldSpec(seed=7))
    b = gen_corpus(SyntheticWorldSpec(seed=7))
    assert [c.id for c in a.train] == [c.id for c in b.train]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a.train, b.train))


def test_corpus_counts_and_unique_captions():
    data = gen_corpus(SyntheticWorldSpec(num_classes=4, videos_per_class=4))
    assert len(data.train) == 16
    assert len({c.caption for c in data.train}) == 16
    assert data.label_names == ["square", "circle", "triangle", "cross"]


def test_corpus_captions_encode(vocab):
    data = gen_corpus(SyntheticWorldSpec(videos_per_class=8))
    for c in data.train:
        assert vocab.decode(vocab.encode(c.caption)) == c.caption
        assert c.frames.min() >= 0.0 and c.frames.max() <= 1.0


def test_corpus_rejects_bad_specs():
    with pytest.raises(DataError):
        gen_corpus(SyntheticWorldSpec(num_classes=9))
    with pytest.raises(DataError):
        gen_corpus(SyntheticWorldSpec(frame_size=(4, 4)))
    with pytest.raises(DataError):
        gen_corpus(SyntheticWorldSpec(vocab=("<pad>", "<bos>", "<eos>")))


def test_palette_has_equal_channel_means():
    for rgb in COLORS.values():
        assert abs(np.mean(rgb) - 0.5) < 1e-4


def test_xor_corpus_labels_and_branch_views():
    data = gen_xor_corpus(per_cell=4, test_per_cell=2)
    assert len(data.train) == 16 and len(data.test) == 8
    for c in data.train + data.test:
        assert c.labels == (c.meta["axis"] ^ c.meta["group"],)
        horizontal = c.meta["direction"] in ("left", "right")
        assert horizontal == (c.meta["axis"] == 0)
        assert (c.meta["color"] in ("red", "yellow")) == (c.meta["group"] == 0)
    by_axis = relabel_by_meta(data, "axis", ["horizontal", "vertical"])
    assert [c.labels[0] for c in by_axis.train] == [c.meta["axis"] for c in data.train]


def test_image_view_single_frame():
    data = gen_corpus(SyntheticWorldSpec(num_classes=2, videos_per_class=2))
    img = image_view(data)
    assert all(c.num_frames == 1 and c.caption == ("a", data.label_names[c.labels[0]]) for c in img.train)


def test_sample_clip_examples():
    assert frame_ids(sample_clip(indexed_video(64), 16, 4)) == list(range(0, 64, 4))
    assert frame_ids(sample_clip(indexed_video(10), 4, 4)) == [0, 4, 8, 2]
    assert sample_clip(indexed_video(10), 1, 1).num_frames == 1


@given(st.integers(1, 40), st.integers(1, 20), st.integers(1, 6), st.integers(0, 100))
def test_sample_clip_always_has_f_frames(n, f, r, start):
    clip = sample_clip(indexed_video(n), f, r, start)
    assert clip.num_frames == f
    assert frame_ids(clip) == [(start + r * i) % n for i in range(f)]


def test_sample_clip_random_start_needs_rng():
    with pytest.raises(ValueError):
        sample_clip(indexed_video(5), 2, 1, start=None)


def test_multi_scale_crop_examples():
    r = np.random.default_rng(0)
    frames = r.random((2, 8, 8, 3))
    clip = VideoClip(frames, "x")
    assert np.array_equal(multi_scale_crop(clip, [1.0], (8, 8), r).frames, frames)
    np.testing.assert_array_equal(multi_scale_crop(clip, [1.0], (4, 4), r).frames, resize_bilinear(frames, (4, 4)))
    half = np.zeros((1, 8, 8, 1))
    half[:, :, 4:] = 1.0
    # every 4x4 crop whose offset lands in the black left half is all black
    rr = np.random.default_rng(3)
    seen_black = False
    for _ in range(40):
        out = multi_scale_crop(VideoClip(half, "h"), [0.5], (4, 4), rr).frames
        if out.max() == 0.0:
            seen_black = True
    assert seen_black


def test_repeated_sampling():
    batch = ["s1", "s2", "s3", "s4"]
    assert repeated_sampling(batch, 1) == batch
    assert repeated_sampling(batch, 2) == ["s1", "s1", "s2", "s2", "s3", "s3", "s4", "s4"]
    clip = VideoClip(np.random.default_rng(0).random((2, 8, 8, 3)), "c")
    aug = lambda c, rng: multi_scale_crop(c, [1.0, 0.75, 0.5], (4, 4), rng)
    a, b = repeated_sampling([clip], 2, aug, np.random.default_rng(1))
    assert a.id == b.id and not np.array_equal(a.frames, b.frames)


def labeled(vid, label):
    return VideoClip(np.full((1, 2, 2, 1), hash(vid) % 7 / 7.0), vid, (label,))


def test_merge_hand_example():
    A = DatasetSpec("A", [labeled("v1", 0), labeled("v2", 1)], [labeled("v3", 0)], ["c1", "c2"])
    B = DatasetSpec("B", [labeled("v2", 0), labeled("v3", 1)], [labeled("v4", 0)], ["c2", "c3"])
    m = merge_label_spaces([A, B])
    assert [c.id for c in m.train] == ["v1", "v2"]
    assert m.label_names == ["c1", "c2", "c3"]
    assert [c.labels for c in m.train] == [(0,), (1,)]


def test_merge_identity_and_dedup():
    A = DatasetSpec("A", [labeled("v1", 0), labeled("v2", 1)], [labeled("t", 0)], ["c1", "c2"])
    m = merge_label_spaces([A])
    assert [c.id for c in m.train] == ["v1", "v2"] and m.label_names == A.label_names
    assert len(merge_label_spaces([A, A]).train) == 2


def test_merge_conflicting_payload_raises():
    A = DatasetSpec("A", [labeled("v1", 0)], [], ["c1"])
    B = DatasetSpec("B", [replace(labeled("v1", 0), frames=np.ones((1, 2, 2, 1)) * 0.99)], [], ["c1"])
    with pytest.raises(DataError):
        merge_label_spaces([A, B])


def test_split_video_and_hybrid():
    assert [c.num_frames for c in split_video(indexed_video(900), 300)] == [300] * 3
    assert len(split_video(indexed_video(901), 300)) == 3
    A = DatasetSpec("A", [indexed_video(2, f"a{i}") for i in range(10)])
    B = DatasetSpec("B", [indexed_video(2, f"b{i}") for i in range(20)])
    h = build_hybrid([(A, 5, None), (B, 5, None)], np.random.default_rng(0))
    assert len(h.train) == 10
    assert sum(c.id.startswith("a") for c in h.train) == 5
    assert all(c.labels == () for c in h.train)
    with pytest.raises(DataError):
        build_hybrid([(A, 11, None)], np.random.default_rng(0))


def test_cotrain_schedule_examples():
    assert cotrain_schedule([1, 3], 4) == [1, 0, 1, 1]
    assert cotrain_schedule([1, 1], 4) == [0, 1, 0, 1]
    assert cotrain_schedule([5], 3) == [0, 0, 0]


@given(st.lists(st.integers(1, 50), min_size=1, max_size=4), st.integers(1, 20))
def test_cotrain_counts_are_proportional(sizes, cycles):
    steps = sum(sizes) * cycles
    seq = cotrain_schedule(sizes, steps)
    assert [seq.count(i) for i in range(len(sizes))] == [s * cycles for s in sizes]


def test_dataset_round_trip(tmp_path):
    data = gen_corpus(SyntheticWorldSpec(num_classes=2, videos_per_class=2, test_per_class=1))
    back = load_dataset(save_dataset(data, tmp_path / "d"))
    assert back.name == data.name and back.label_names == data.label_names
    for a, b in zip(data.train + data.test, back.train + back.test):
        assert (a.id, a.labels, a.caption) == (b.id, b.labels, b.caption)
        np.testing.assert_allclose(a.frames, b.frames, atol=1e-7)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    root = save_dataset(gen_corpus(SyntheticWorldSpec(num_classes=1, videos_per_class=1)), tmp_path / "d")
    payload = next((root / "frames").iterdir())
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(DataError):
        load_dataset(root)


def test_vocab_rejects_unknown_words():
    with pytest.raises(DataError):
        Vocab().encode(["zebra"])
