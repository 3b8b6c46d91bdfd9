import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_dataset
from radarseg4d.dataset import (
    CompiledDataset,
    DatasetConfig,
    DatasetError,
    class_stats,
    class_weights,
    compile_dataset,
    pair_annotations,
    read_mask,
    split_sequences,
    write_mask,
)
from radarseg4d.projection import compute_global_stats, normalize
from radarseg4d.synthetic import SynthConfig, write_synthetic_raw
from radarseg4d.views import VIEW_IDS


def test_pairing_nearest_and_tie():
    assert pair_annotations([(100, "c")], [(90, "a"), (120, "b")]) == [("c", "a")]
    assert pair_annotations([(100, "c")], [(90, "a"), (110, "b")]) == [("c", "a")]


def test_pairing_threshold_drops():
    assert pair_annotations([(0, "c")], [(200_000_000, "m")]) == []
    assert pair_annotations([(0, "c")], [(200_000_000, "m")], threshold_ns=None) == [("c", "m")]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=30, unique=True),
       st.lists(st.integers(0, 10**6), min_size=1, max_size=30, unique=True))
def test_pairing_matches_argmin(cloud_ts, mask_ts):
    clouds = [(t, t) for t in sorted(cloud_ts)]
    masks = [(t, t) for t in sorted(mask_ts)]
    got = pair_annotations(clouds, masks, threshold_ns=None)
    for (c, m) in got:
        # exhaustive argmin; ties resolved towards the earlier timestamp
        best = min(mask_ts, key=lambda t: (abs(t - c), t))
        assert m == best
    assert len(got) == len(clouds)


def test_split_counts_and_reproducible():
    names = [f"s{i}" for i in range(10)]
    a = split_sequences(names, (0.8, 0.1, 0.1), seed=0)
    b = split_sequences(list(reversed(names)), (0.8, 0.1, 0.1), seed=0)
    assert a == b
    assert sorted(a.values()).count("train") == 8
    assert list(a.values()).count("val") == 1 and list(a.values()).count("test") == 1


def test_split_all_train():
    assert set(split_sequences(["a", "b", "c"], (1, 0, 0)).values()) == {"train"}


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000),
       st.tuples(st.integers(1, 10), st.integers(1, 10), st.integers(1, 10)))
def test_split_partition_property(n, seed, raw):
    ratios = tuple(r / sum(raw) for r in raw)
    names = [f"seq{i:03d}" for i in range(n)]
    assign = split_sequences(names, ratios, seed)
    # every sequence lands in exactly one split and every split gets one
    assert sorted(assign) == names
    assert set(assign.values()) == {"train", "val", "test"}


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_sequences(["a", "b"], (0.5, 0.6, 0.1))
    with pytest.raises(ValueError):
        split_sequences(["a"], (0.5, 0.25, 0.25))


def test_class_stats_cases():
    s = class_stats([np.zeros((128, 128), np.uint8)] * 3)
    assert (s.person_fraction, s.nonempty_fraction) == (0.0, 0.0)
    m = np.zeros((128, 128), np.uint8)
    m.flat[:164] = 1
    s = class_stats([m])
    assert s.person_fraction == 164 / 16384
    assert s.nonempty_fraction == 1.0


def test_class_weights_complement_prevalence():
    m = np.zeros((10, 100), np.uint8)
    m.flat[:11] = 1
    assert class_weights([m]) == [1 - 0.989, 1 - 0.011]
    q = np.zeros((4, 4), np.uint8)
    q[0] = 1
    assert class_weights([q]) == [0.25, 0.75]


def test_mask_png_roundtrip(tmp_path):
    m = np.random.default_rng(0).integers(0, 2, (128, 128)).astype(np.uint8)
    write_mask(tmp_path / "a.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "a.png"), m)
    write_mask(tmp_path / "b.png", np.zeros((64, 64)))
    with pytest.raises(DatasetError):
        read_mask(tmp_path / "b.png")


def test_compile_empty_raw(tmp_path):
    (tmp_path / "raw").mkdir()
    with pytest.raises(DatasetError, match="no sequences"):
        compile_dataset(tmp_path / "raw", tmp_path / "out")


def test_compile_counts(tmp_path):
    synth = SynthConfig(seed=3, frames=3, frames_per_sequence=3, visible_fraction=(1.0, 1.0))
    ds = build_dataset(tmp_path, synth, ratios=(1.0, 0.0, 0.0))
    root = tmp_path / "ds"
    assert len(list(root.glob("*/*/*.bin"))) == 15
    assert len(list(root.glob("*/annotations/*.png"))) == 3
    assert (root / "synth_0000" / "frames.json").is_file()
    assert ds.frame_ids("synth_0000") == ["000000", "000001", "000002"]


def test_compile_refuses_foreign_directory(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    synth = SynthConfig(seed=3, frames=3, frames_per_sequence=3, visible_fraction=(1.0, 1.0))
    write_synthetic_raw(synth, tmp_path / "raw")
    with pytest.raises(DatasetError):
        compile_dataset(tmp_path / "raw", out, DatasetConfig(split_ratios=(1, 0, 0)))
    assert (out / "keep.txt").exists()


def test_compile_skips_bad_files(tmp_path):
    synth = SynthConfig(seed=3, frames=4, frames_per_sequence=4, visible_fraction=(1.0, 1.0))
    write_synthetic_raw(synth, tmp_path / "raw")
    bad = tmp_path / "raw" / "synth_0000" / "pointclouds" / "999.pcd"
    bad.write_text("garbage\n")
    summary = compile_dataset(tmp_path / "raw", tmp_path / "out", DatasetConfig(split_ratios=(1, 0, 0)))
    assert [f for f, _ in summary.failures] == [str(bad)]
    assert summary.n_frames == 4


def test_stats_json_reproduced_by_rescan(small_dataset):
    ds = small_dataset
    frames, masks = [], []
    for names in ds.splits.values():
        for seq in names:
            for fid in ds.frame_ids(seq):
                frames.append({v: ds.load_heatmap(seq, fid, v) for v in VIEW_IDS})
                masks.append(ds.load_mask(seq, fid))
    stats = json.loads((ds.root / "stats.json").read_text())
    assert compute_global_stats(frames).to_dict() == stats["norm"]
    assert class_stats(masks).to_dict() == stats["classes"]


def test_splits_are_disjoint(small_dataset):
    seen = {}
    for split, names in small_dataset.splits.items():
        for n in names:
            assert n not in seen
            seen[n] = split
    assert set(seen) == set(small_dataset.frames)


def test_window_counting(tmp_path):
    for n_frames, expected in ((5, 1), (4, 0)):
        synth = SynthConfig(seed=2, frames=n_frames, frames_per_sequence=n_frames, visible_fraction=(1.0, 1.0))
        ds = build_dataset(tmp_path / str(n_frames), synth, ratios=(1.0, 0.0, 0.0))
        assert len(ds.windows("train", 5)) == expected


def test_window_equals_manual_gather(small_dataset):
    ds = small_dataset
    seq = ds.sequences("train")[0]
    ids = ds.frame_ids(seq)
    window, mask = ds.load_window(seq, 6)
    for v in VIEW_IDS:
        raw = np.fromfile(ds.root / seq / v.lower() / f"{ids[6]}.bin", dtype="<f4")
        manual = [normalize(np.fromfile(ds.root / seq / v.lower() / f"{ids[k]}.bin", dtype="<f4")
                            .reshape(ds.view_shapes[v]), ds.norm[v]) for k in range(2, 7)]
        np.testing.assert_array_equal(window[v], np.stack(manual))
        assert raw.size == np.prod(ds.view_shapes[v])
    np.testing.assert_array_equal(mask, read_mask(ds.root / seq / "annotations" / f"{ids[6]}.png"))
    with pytest.raises(IndexError):
        ds.load_window(seq, 3)


def test_missing_files_reported(small_dataset, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(small_dataset.root, copy)
    ds = CompiledDataset(copy)
    seq = ds.sequences("val")[0]
    (copy / seq / "ea" / "000004.bin").unlink()
    assert ds.missing_files("val") == [f"{seq}/000004"]


def test_not_a_dataset(tmp_path):
    with pytest.raises(DatasetError):
        CompiledDataset(tmp_path)
