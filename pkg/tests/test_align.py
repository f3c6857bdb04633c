import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vifiassoc.align import (
    AlignedSequence,
    align_scene,
    drop_invalid,
    interpolate_to,
    load_valid_ranges,
    subsample_frames,
)
from vifiassoc.errors import DataError
from vifiassoc.signal_source import Modality, Scene, SceneConfig, SignalTrace, simulate_scene


def trace(ts, vs=None, modality=Modality.VISION, eid="a"):
    ts = list(ts)
    vs = [1.0 + i for i in range(len(ts))] if vs is None else vs
    return SignalTrace(eid, modality, ts, vs)


def test_drop_invalid():
    t = trace([0, 100, 200])
    assert drop_invalid(t, [(0, math.inf)]) == t
    assert len(drop_invalid(t, [])) == 0
    out = drop_invalid(t, [(50, 150)])
    assert list(out.timestamps_ms) == [100]


def test_subsample():
    t = trace(range(0, 800, 100))
    assert subsample_frames(t, 1) == t
    assert list(subsample_frames(t, 4).timestamps_ms) == [0, 400]
    assert len(subsample_frames(trace([]), 4)) == 0
    with pytest.raises(ValueError):
        subsample_frames(t, 0)


def test_interpolate_examples():
    ftm = trace([0, 1000], [5.0, 7.0], Modality.WIRELESS)
    assert interpolate_to([0], ftm)[0] == 5.0
    assert interpolate_to([250], ftm)[0] == pytest.approx(5.5, abs=1e-15)
    single = trace([0], [5.0], Modality.WIRELESS)
    assert interpolate_to([900], single)[0] == 5.0
    # clamping on both sides
    assert list(interpolate_to([-10, 5000], ftm)) == [5.0, 7.0]
    with pytest.raises(DataError):
        interpolate_to([0], trace([], [], Modality.WIRELESS))


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-0.01, 0.01),
    b=st.floats(1.0, 50.0),
    n=st.integers(2, 40),
    seed=st.integers(0, 2**32 - 1),
)
def test_interpolation_exact_on_affine(a, b, n, seed):
    rng = np.random.default_rng(seed)
    ts = np.unique(rng.integers(0, 100_000, size=n))
    if ts.size < 2:
        return
    vals = a * ts + b
    if np.any(vals <= 0):
        return
    ftm = trace(ts, vals, Modality.WIRELESS)
    q = np.sort(rng.uniform(ts[0], ts[-1], size=50))
    got = interpolate_to(q, ftm)
    np.testing.assert_allclose(got, a * q + b, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(ts=st.lists(st.integers(0, 10_000), min_size=0, max_size=30, unique=True), stride=st.integers(1, 5))
def test_monotone_preserved(ts, stride):
    t = trace(sorted(ts))
    for out in (subsample_frames(t, stride), drop_invalid(t, [(1000, 5000), (6000, 9000)])):
        assert np.all(np.diff(out.timestamps_ms) > 0)


def test_noiseless_scene_aligns_exactly():
    # FTM at 2.5 Hz lands on every 4th camera frame, so interpolation is exact
    cfg = SceneConfig(duration_s=60, ftm_rate_hz=2.5, depth_noise_sigma_m=0, ftm_noise_sigma_m=0, rng_seed=2)
    scene = simulate_scene(cfg)
    al = align_scene(scene, stride=4)
    for fid, sig in al.wireless_signals.items():
        (vid,) = scene.ground_truth[fid]
        assert np.max(np.abs(al.vision_signals[vid] - sig)) <= 1e-9


def test_aligned_rate():
    scene = simulate_scene(SceneConfig(duration_s=20, rng_seed=1))
    al = align_scene(scene, stride=4)
    assert set(np.diff(al.timestamps_ms)) == {400}  # 10 Hz / 4 = 2.5 Hz
    assert len(al) == 50
    assert al.n_ftm == scene.config.n_phone_holders
    assert all(len(v) == len(al) for v in al.wireless_signals.values())


def test_late_ftm_trimmed_by_valid_ranges():
    vision = trace(range(0, 3000, 100), [4.0] * 30)
    ftm = trace(range(500, 3000, 333), [5.0] * len(range(500, 3000, 333)), Modality.WIRELESS, "p")
    scene = Scene(None, (vision,), (ftm,))
    al = align_scene(scene, stride=1, valid_ranges=[(500, 10_000)])
    assert al.timestamps_ms[0] >= ftm.timestamps_ms[0]


def test_missing_vision_frames_are_nan():
    a = trace([0, 100, 200, 300], [1.0, 2, 3, 4], eid="a")
    b = trace([0, 200], [5.0, 6], eid="b")
    ftm = trace([0, 300], [1.0, 4.0], Modality.WIRELESS, "p")
    al = align_scene(Scene(None, (a, b), (ftm,)), stride=1)
    np.testing.assert_array_equal(al.timestamps_ms, [0, 100, 200, 300])
    assert np.isnan(al.vision_signals["b"][[1, 3]]).all()
    np.testing.assert_allclose(al.wireless_signals["p"], [1, 2, 3, 4])


def test_idempotent():
    scene = simulate_scene(SceneConfig(duration_s=20, rng_seed=4))
    al = align_scene(scene, stride=4)
    again = align_scene(al.as_scene(), stride=1)
    np.testing.assert_array_equal(again.timestamps_ms, al.timestamps_ms)
    for d0, d1 in ((al.vision_signals, again.vision_signals), (al.wireless_signals, again.wireless_signals)):
        assert d0.keys() == d1.keys()
        for k in d0:
            np.testing.assert_array_equal(d0[k], d1[k])


def test_empty_wireless_trace_rejected():
    scene = Scene(None, (trace([0, 100]),), (trace([], [], Modality.WIRELESS, "p"),))
    with pytest.raises(DataError):
        align_scene(scene)


def test_aligned_sequence_validates_lengths():
    with pytest.raises(DataError):
        AlignedSequence(np.array([0, 1]), {"a": np.zeros(3)}, {})


def test_valid_ranges_file(tmp_path):
    p = tmp_path / "valid.csv"
    p.write_text("start_ms,end_ms\n5000,9000\n0,1000\n")
    assert load_valid_ranges(p) == [(0, 1000), (5000, 9000)]
    p.write_text("start_ms,end_ms\n0,1000\n500,2000\n")
    with pytest.raises(DataError):
        load_valid_ranges(p)
