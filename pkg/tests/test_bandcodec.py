import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vifiassoc.align import AlignedSequence
from vifiassoc.bandcodec import (
    BandImage,
    QuantizationRange,
    compute_range,
    decode_band_image,
    quantize,
    read_pgm,
    render_band_image,
    render_single_slotted,
    slots_for_height,
    write_pgm,
)
from vifiassoc.errors import DataError

R = QuantizationRange(2.0, 12.0)


def aligned(vision, wireless):
    n = len(next(iter({**vision, **wireless}.values())))
    return AlignedSequence(
        np.arange(n) * 400,
        {k: np.asarray(v, float) for k, v in vision.items()},
        {k: np.asarray(v, float) for k, v in wireless.items()},
    )


def test_compute_range():
    r = compute_range(aligned({"a": [2.0, 5.0]}, {"p": [12.0, 7.0]}))
    assert (r.min_m, r.max_m) == (2.0, 12.0)
    r = compute_range(aligned({"a": [3.0, 9.0, np.nan]}, {"p": [4.0, 11.0, 5.0]}))
    assert r.max_m == 11.0
    assert compute_range(aligned({"a": [3.0, 9.0]}, {"p": [4.0, 11.0]}), "vision").max_m == 9.0
    with pytest.raises(DataError):
        compute_range(aligned({"a": [5.0, 5.0, 5.0]}, {}))


def test_quantize_examples():
    assert quantize(2.0, R) == 0
    assert quantize(12.0, R) == 255
    assert quantize(7.0, R) == 128  # 127.5 rounds half up
    assert quantize(-100.0, R) == 0
    assert quantize(100.0, R) == 255
    assert quantize(np.nan, R) == 0


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 20), st.floats(-5, 20))
def test_quantize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize(lo, R) <= quantize(hi, R)


def test_geometry_examples():
    img = render_band_image([(str(i), np.full(10, 5.0)) for i in range(3)], R)
    assert (img.width, img.height) == (10, 50)
    img = render_band_image([("a", np.linspace(2, 12, 25))], R)
    assert (img.width, img.height) == (25, 10)


def test_band_layout_and_separator():
    lo, hi = np.full(4, 2.0), np.full(4, 12.0)
    img = render_band_image([("lo", lo), ("hi", hi)], R)
    assert np.all(img.pixels[0:10] == 0)
    assert np.all(img.pixels[10:20] == 128)
    assert np.all(img.pixels[20:30] == 255)
    assert img.slot_order == ("lo", "hi")


def test_separator_is_per_column_mean():
    a = np.array([2.0, 4.0, 6.0])
    b = np.array([12.0, 8.0, 6.0])
    img = render_band_image([("a", a), ("b", b)], R)
    np.testing.assert_array_equal(img.pixels[15], quantize((a + b) / 2, R))


def test_missing_paints_zero():
    img = render_band_image([("a", np.array([np.nan, 7.0]))], R)
    assert list(img.pixels[0]) == [0, 128]


def test_mismatched_lengths():
    with pytest.raises(DataError):
        render_band_image([("a", np.zeros(3) + 5), ("b", np.zeros(4) + 5)], R)
    with pytest.raises(DataError):
        render_band_image([], R)


def test_single_slotted():
    img = render_single_slotted(np.full(10, 7.0), R, 3, "x")
    assert img.height == 50
    assert np.all(img.pixels == 128)
    single = render_single_slotted(np.linspace(2, 12, 10), R, 1, "x")
    assert single == render_band_image([("x", np.linspace(2, 12, 10))], R)
    sig = np.linspace(3, 9, 10)
    rep = render_single_slotted(sig, R, 3)
    for i in range(3):
        np.testing.assert_array_equal(rep.pixels[20 * i : 20 * i + 10], rep.pixels[0:10])


def test_decode_extremes():
    zeros = BandImage(np.zeros((30, 5), np.uint8), ["a", "b"])
    assert all(np.all(v == 2.0) for v in decode_band_image(zeros, R))
    full = BandImage(np.full((30, 5), 255, np.uint8), ["a", "b"])
    assert all(np.all(v == 12.0) for v in decode_band_image(full, R))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 8), k=st.integers(2, 64), seed=st.integers(0, 2**32 - 1))
def test_round_trip_and_geometry(n, k, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0.5, 5)
    r = QuantizationRange(lo, lo + rng.uniform(0.5, 20))
    sigs = [rng.uniform(r.min_m, r.max_m, size=k) for _ in range(n)]
    img = render_band_image([(str(i), s) for i, s in enumerate(sigs)], r)
    assert (img.width, img.height) == (k, (2 * n - 1) * 10)
    bound = (r.max_m - r.min_m) / 255 / 2 + 1e-12
    for got, want in zip(decode_band_image(img, r), sigs):
        assert np.max(np.abs(got - want)) <= bound


def test_band_image_validates_height():
    with pytest.raises(DataError):
        BandImage(np.zeros((20, 5), np.uint8), ["a", "b"])
    assert slots_for_height(50) == 3
    with pytest.raises(DataError):
        slots_for_height(40)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = BandImage(rng.integers(0, 256, size=(30, 7), dtype=np.uint8), ["a", "b"])
    p = tmp_path / "seq_0_depth.pgm"
    write_pgm(p, img)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n7 30\n255\n")
    assert len(raw) == len(b"P5\n7 30\n255\n") + 30 * 7
    np.testing.assert_array_equal(read_pgm(p), img.pixels)


def test_pgm_with_comment_and_truncation(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 2\n255\n\x00\x01\x02\x03")
    np.testing.assert_array_equal(read_pgm(p), [[0, 1], [2, 3]])
    p.write_bytes(b"P5\n2 2\n255\n\x00\x01")
    with pytest.raises(DataError):
        read_pgm(p)
    p.write_bytes(b"P2\n2 2\n255\n0 1 2 3")
    with pytest.raises(DataError):
        read_pgm(p)
