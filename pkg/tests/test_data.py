import json

import numpy as np
import pytest

from jffra.data import (
    ConfigurationError,
    Dataset,
    DegradationSpec,
    IngestionError,
    SinusoidTexture,
    clip_seed,
    degrade,
    ingest_dataset,
    materialize_degraded,
    read_clip_dir,
    sample_batch,
    synthetic_clip,
    write_clip_dir,
)
from jffra.flow import FlowProvider
from jffra.resize import imresize_hwc
from jffra.types import ParameterError, VideoClip


def test_awgn_statistics_and_determinism():
    clip = VideoClip(np.full((4, 64, 64, 3), 0.5))
    spec = DegradationSpec("awgn", 25, seed=7)
    a, b = degrade(clip, spec), degrade(clip, spec)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert np.std(a.frames - 0.5) == pytest.approx(25 / 255, rel=0.03)
    assert not np.array_equal(a.frames, degrade(clip, spec.with_seed(8)).frames)
    assert a.frames.min() >= 0 and a.frames.max() <= 1


def test_degradation_edge_cases():
    clip = VideoClip(np.full((2, 8, 8, 3), 0.5))
    assert degrade(clip, DegradationSpec("awgn", 0)) is clip
    assert degrade(clip, DegradationSpec("none")) is clip
    with pytest.raises(ParameterError):
        DegradationSpec("awgn", 60)
    with pytest.raises(ConfigurationError):
        DegradationSpec("jpeg")
    with pytest.raises(ParameterError):
        degrade(VideoClip(np.zeros((1, 6, 8, 3))), DegradationSpec("bicubic_x4"))


def test_blind_noise_level_within_bound():
    clip = VideoClip(np.full((2, 64, 64, 1), 0.5))
    for seed in range(5):
        out = degrade(clip, DegradationSpec("awgn", 20, seed=seed, blind=True))
        assert np.std(out.frames - 0.5) < 20 / 255 * 1.05


def test_bicubic_x4_matches_resize():
    clip, _ = synthetic_clip(2, 32, 32, 3, seed=0)
    lq = degrade(clip, DegradationSpec("bicubic_x4"))
    assert lq.shape == (2, 8, 8, 3)
    np.testing.assert_allclose(lq.frames[0], np.clip(imresize_hwc(clip.frames[0], 0.25), 0, 1))


def test_synthetic_translation_is_exact_shift():
    tex = SinusoidTexture.random(3, seed=1)
    clip, _ = synthetic_clip(3, 16, 16, 3, {"kind": "translation", "dx": 2.0, "dy": 1.0}, texture=tex)
    # frame t at (x, y) equals frame 0 at (x - 2t, y - t)
    np.testing.assert_allclose(clip.frames[1][1:, 2:], clip.frames[0][:-1, :-2], atol=1e-12)
    assert clip.frames.min() >= 0.05 - 1e-12 and clip.frames.max() <= 0.95 + 1e-12


def test_synthetic_rotation_keeps_centre():
    clip, _ = synthetic_clip(3, 17, 17, 1, {"kind": "rotation_small", "angle": 2.0}, seed=0)
    np.testing.assert_allclose(clip.frames[0, 8, 8], clip.frames[2, 8, 8])


def _write_dataset(root, clips):
    for name, clip in clips.items():
        write_clip_dir(root / name, clip)


def test_ingest_and_round_trip(tmp_path):
    a, _ = synthetic_clip(3, 16, 16, 3, seed=0)
    b, _ = synthetic_clip(4, 16, 16, 3, seed=1)
    _write_dataset(tmp_path, {"a": a, "b": b})
    ds = ingest_dataset(tmp_path)
    assert ds.names == ["a", "b"] and ds.num_frames == 7
    assert np.max(np.abs(ds.clip("a").frames - a.frames)) <= 0.5 / 255 + 1e-12
    (tmp_path / "m.json").write_text(json.dumps({"train": ["a"], "test": ["b"]}))
    assert ingest_dataset(tmp_path, tmp_path / "m.json", "test").names == ["b"]
    (tmp_path / "m.yaml").write_text("train: [a]\n")
    assert ingest_dataset(tmp_path, tmp_path / "m.yaml", "train").names == ["a"]


def test_ingest_errors(tmp_path):
    a, _ = synthetic_clip(3, 16, 16, 3, seed=0)
    _write_dataset(tmp_path, {"a": a})
    (tmp_path / "a" / "000001.png").unlink()
    with pytest.raises(IngestionError, match="missing"):
        ingest_dataset(tmp_path)
    with pytest.raises(IngestionError):
        ingest_dataset(tmp_path / "nope")
    b, _ = synthetic_clip(1, 8, 8, 3, seed=0)
    write_clip_dir(tmp_path / "c", VideoClip(np.concatenate([b.frames[:1]] * 1)), ["000000.png"])
    c2, _ = synthetic_clip(1, 8, 12, 3, seed=0)
    write_clip_dir(tmp_path / "c", c2, ["000001.png"])
    with pytest.raises(IngestionError, match="inconsistent"):
        ingest_dataset(tmp_path, {"x": ["c"]})
    with pytest.raises(IngestionError):
        ingest_dataset(tmp_path, {"x": ["zzz"]})


def test_materialize_degraded(tmp_path):
    a, _ = synthetic_clip(2, 16, 16, 3, seed=0)
    ds = Dataset.from_clips({"a": a})
    out = materialize_degraded(ds, tmp_path / "lq", DegradationSpec("awgn", 10, seed=3))
    clip, names = read_clip_dir(out / "a")
    assert names == ["000000.png", "000001.png"]
    expected = degrade(a, DegradationSpec("awgn", 10, seed=clip_seed(3, "a")))
    assert np.max(np.abs(clip.frames - expected.frames)) <= 0.5 / 255 + 1e-12


def test_sample_batch_shapes_and_flows():
    motion = {"kind": "translation", "dx": 1.0, "dy": -0.5}
    clip, motion = synthetic_clip(8, 40, 40, 3, motion, seed=0)
    ds = Dataset.from_clips({"a": clip})
    prov = FlowProvider("synthetic_oracle", motion=motion)
    b = sample_batch(ds, 3, 16, 11, DegradationSpec("awgn", 25), prov)
    assert b.lq.shape == (3, 5, 16, 16, 3) and b.hq.shape == (3, 5, 16, 16, 3)
    assert b.gt_flows.shape == (3, 2, 16, 16, 2)
    np.testing.assert_allclose(b.gt_flows[:, 0, ..., 0], -1.0)
    np.testing.assert_allclose(b.gt_flows[:, 1, ..., 1], -0.5)
    for times in b.times:
        assert list(np.diff(times)) == [1, 1, 1, 1]
    assert len(b.lq_windows) == 3 and b.lq_windows[0].reference_index == 1
    again = sample_batch(ds, 3, 16, 11, DegradationSpec("awgn", 25), prov)
    np.testing.assert_array_equal(b.lq, again.lq)


def test_sample_batch_sr_and_errors():
    clip, _ = synthetic_clip(5, 32, 32, 3, seed=0)
    ds = Dataset.from_clips({"a": clip})
    b = sample_batch(ds, 1, 16, 0, DegradationSpec("bicubic_x4"), FlowProvider("zero"))
    assert b.lq.shape == (1, 5, 4, 4, 3) and b.hq.shape == (1, 5, 16, 16, 3)
    with pytest.raises(ParameterError):
        sample_batch(ds, 1, 64, 0)
    with pytest.raises(ParameterError):
        sample_batch(ds, 1, 8, 0, min_patch=16)
    with pytest.raises(ParameterError):
        sample_batch(ds, 1, 18, 0, DegradationSpec("bicubic_x4"))
