# tests/test_data.py
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from src.config import DataConfig
from src.data import (
    DatasetSplit,
    FrameArchive,
    PrecipSituation,
    RadarFrame,
    assign_splits,
    build_index,
    dbz_byte_to_mldbz,
    is_rainy,
    load_split,
    make_samples,
    mldbz_to_dbz,
    mldbz_to_dbz_byte,
    situation_stats,
    split_counts,
    split_samples,
    split_situations,
    synth_advection_dataset,
)
from src.errors import DataError, InfeasibleSplitError
from src.exporters import export_frames, export_index_csv, export_split_manifest

T0 = datetime(2021, 6, 1, tzinfo=timezone.utc)
STEP = timedelta(minutes=10)


def _stamps(n, start=T0):
    return [start + i * STEP for i in range(n)]


def test_byte_scaling():
    assert dbz_byte_to_mldbz(255) == 1.0
    assert dbz_byte_to_mldbz(0) == 0.0
    assert dbz_byte_to_mldbz(51) == pytest.approx(0.2)
    assert mldbz_to_dbz(dbz_byte_to_mldbz(51)) == pytest.approx(12.0)
    with pytest.raises(DataError):
        dbz_byte_to_mldbz(256)


def test_byte_scaling_is_a_bijection():
    codes = np.arange(256)
    values = dbz_byte_to_mldbz(codes)
    assert np.all(np.diff(values) > 0)
    assert np.array_equal(mldbz_to_dbz_byte(values), codes)


def test_is_rainy_clauses():
    frame = np.zeros((10, 10))
    frame.flat[:8] = 10 / 60
    assert is_rainy(frame)
    frame = np.zeros((10, 10))
    frame.flat[:2] = 30 / 60
    assert is_rainy(frame)
    frame = np.zeros((10, 10))
    frame.flat[:7] = 10 / 60
    assert not is_rainy(frame)
    assert not is_rainy(np.zeros((8, 8)))


def test_radar_frame_validation():
    frame = RadarFrame(datetime(2021, 1, 1), np.zeros((4, 4)))
    assert frame.timestamp.tzinfo is not None
    with pytest.raises(DataError):
        RadarFrame(T0, np.full((4, 4), 1.5))
    with pytest.raises(DataError):
        RadarFrame(T0, np.zeros(4))


def test_split_situations_gap_boundary():
    assert len(split_situations([T0, T0 + timedelta(hours=23, minutes=50)])) == 1
    assert len(split_situations([T0, T0 + timedelta(hours=24)])) == 2
    assert split_situations([]) == []
    with pytest.raises(DataError):
        split_situations([T0 + STEP, T0])


def test_situation_counts_and_stats():
    stamps, start = [], T0
    for _ in range(275):
        stamps.extend(_stamps(4, start))
        start = stamps[-1] + timedelta(hours=30)
    situations = split_situations(stamps)
    assert len(situations) == 275
    assert situations[0].hours == pytest.approx(0.5)
    stats = situation_stats(situations)
    assert stats["count"] == 275 and stats["median_hours"] == pytest.approx(0.5)


def test_split_counts():
    assert split_counts(275, (0.72, 0.127, 0.153)) == (198, 35, 42)
    assert split_counts(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert split_counts(3, (0.72, 0.127, 0.153)) == (1, 1, 1)
    assert split_counts(5, (1.0, 0.0, 0.0)) == (5, 0, 0)
    with pytest.raises(InfeasibleSplitError):
        split_counts(2, (0.72, 0.127, 0.153))


def _situations(n):
    return [PrecipSituation(tuple(_stamps(3, T0 + i * timedelta(days=2)))) for i in range(n)]


def test_assign_splits_is_seeded():
    situations = _situations(275)
    a = assign_splits(situations, seed=4)
    b = assign_splits(situations, seed=4)
    assert a.counts == (198, 35, 42)
    assert a == b
    assert assign_splits(situations, seed=5).train != a.train


def test_split_disjointness_is_enforced():
    s = _situations(2)
    with pytest.raises(DataError):
        DatasetSplit(train=(s[0],), validation=(s[0],), test=(s[1],))


def test_fuzzed_streams_keep_independence_and_disjointness():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        gaps = rng.choice([10, 20, 60 * 23, 60 * 24, 60 * 50], size=int(rng.integers(3, 40)))
        stamps = [T0]
        for g in gaps:
            stamps.append(stamps[-1] + timedelta(minutes=int(g)))
        situations = split_situations(stamps)
        assert sum(len(s) for s in situations) == len(stamps)
        for a, b in zip(situations, situations[1:]):
            assert b.start - a.end >= timedelta(hours=24)
        for s in situations:
            assert all(y - x < timedelta(hours=24) for x, y in zip(s.timestamps, s.timestamps[1:]))
        if len(situations) >= 3:
            split = assign_splits(situations, seed=int(rng.integers(0, 100)))
            names = [set(t for s in split.by_name(n) for t in s.timestamps) for n in ("train", "validation", "test")]
            assert not (names[0] & names[1]) and not (names[0] & names[2]) and not (names[1] & names[2])


def test_make_samples_windows():
    assert len(make_samples(_stamps(10), 4, 6)) == 1
    samples = make_samples(_stamps(12), 4, 6)
    assert len(samples) == 3
    assert samples[1].inputs[0] == T0 + STEP
    assert len(samples[1].targets) == 6


def test_make_samples_never_spans_a_hole():
    stamps = _stamps(20)
    del stamps[10]
    samples = make_samples(PrecipSituation(tuple(stamps)), 4, 6)
    assert len(samples) == 1
    for sample in samples:
        assert all(b - a == STEP for a, b in zip(sample.timestamps, sample.timestamps[1:]))


def test_synthetic_static_field():
    data = synth_advection_dataset(DataConfig(grid=16, steps=5, velocity=(0.0, 0.0)))
    assert data.frames.shape == (5, 16, 16)
    for frame in data.frames[1:]:
        assert np.array_equal(frame, data.frames[0])


def test_synthetic_translation_is_a_shift_along_x():
    data = synth_advection_dataset(DataConfig(grid=32, steps=4, velocity=(1.0, 0.0), seed=2))
    for t in range(3):
        shifted = np.roll(data.frames[t], 1, axis=0)
        assert np.max(np.abs(data.frames[t + 1] - shifted)) <= 1 / 255 + 1e-12


def test_synthetic_data_is_seeded_and_quantized():
    cfg = DataConfig(grid=16, steps=3, noise=0.05, diffusion=0.2, seed=7)
    a, b = synth_advection_dataset(cfg), synth_advection_dataset(cfg)
    assert np.array_equal(a.frames, b.frames)
    assert np.allclose(a.frames * 255, np.rint(a.frames * 255))
    assert a.frames.min() >= 0 and a.frames.max() <= 1
    assert a.metadata["velocity"] == [1.0, 0.0]
    assert len(a.metadata["blobs"]) == cfg.blobs


def test_synthetic_situations_are_separated():
    data = synth_advection_dataset(DataConfig(grid=8, steps=3, situations=4, gap_hours=24))
    assert len(split_situations(data.timestamps)) == 4


def _write_archive(root, cfg):
    data = synth_advection_dataset(cfg)
    export_frames(data.frames, data.timestamps, str(root))
    index = build_index(str(root))
    export_index_csv(index, str(root / "index.csv"))
    return data, index


def test_archive_round_trip(tmp_path):
    data, index = _write_archive(tmp_path, DataConfig(grid=16, steps=6))
    assert len(index) == 6
    assert index["timestamp"].iloc[0] == "2020-01-01T00:00:00Z"
    archive = FrameArchive(str(tmp_path))
    assert np.allclose(archive.load(data.timestamps[2]), data.frames[2], atol=1e-7)
    frame = archive.frame(data.timestamps[0])
    assert frame.values.shape == (16, 16)


def test_archive_cache(tmp_path):
    data, _ = _write_archive(tmp_path / "frames", DataConfig(grid=16, steps=2))
    cache = tmp_path / "cache"
    archive = FrameArchive(str(tmp_path / "frames"), str(cache))
    first = archive.load(data.timestamps[1])
    assert len(list(cache.glob("*.npy"))) == 1
    assert np.array_equal(archive.load(data.timestamps[1]), first)


def test_archive_requires_index(tmp_path):
    with pytest.raises(DataError, match="Missing frame index"):
        FrameArchive(str(tmp_path))


def test_split_manifest_round_trip(tmp_path):
    _write_archive(tmp_path, DataConfig(grid=16, steps=12, situations=5))
    archive = FrameArchive(str(tmp_path))
    situations = split_situations(archive.rainy_timestamps())
    split = assign_splits(situations, (0.6, 0.2, 0.2), seed=1)
    export_split_manifest(split, str(tmp_path))
    loaded = load_split(str(tmp_path))
    assert loaded.counts == split.counts == (3, 1, 1)
    for name in ("train", "validation", "test"):
        assert set(loaded.by_name(name)) == set(split.by_name(name))
    assert loaded.seed == 1 and loaded.ratios == (0.6, 0.2, 0.2)
    samples = split_samples(loaded, "train", 4, 6)
    assert len(samples) == 3 * 3
    stacked = archive.stack_samples(samples)
    assert stacked.shape == (9, 10, 16, 16)


def test_load_split_without_manifest(tmp_path):
    with pytest.raises(DataError, match="split manifest"):
        load_split(str(tmp_path))
