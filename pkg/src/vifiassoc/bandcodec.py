"""Grayscale band-image encoding of distance signals.

Each frame of a signal becomes a 1 px wide, ``band_h`` px tall column inside
that signal's band; bands are stacked top to bottom with a separator block
between neighbours whose gray level is the per-column mean of the two
adjacent signals.  A rendered image is ``k`` wide and ``(2N - 1) * band_h``
tall for ``N`` signals.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

BAND_H = 10


@dataclass(frozen=True)
class QuantizationRange:
    min_m: float
    max_m: float

    def __post_init__(self):
        if not self.max_m > self.min_m:
            raise DataError(
                f"degenerate range [{self.min_m}, {self.max_m}]; widen it, constant signals carry no information"
            )


@dataclass(frozen=True, eq=False)
class BandImage:
    pixels: np.ndarray  # uint8, shape (height, width)
    slot_order: tuple[str, ...]
    band_h: int = BAND_H

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "slot_order", tuple(self.slot_order))
        n = len(self.slot_order)
        if px.ndim != 2 or px.shape[0] != (2 * n - 1) * self.band_h:
            raise DataError(f"image shape {px.shape} does not fit {n} slots of height {self.band_h}")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def n_slots(self):
        return len(self.slot_order)

    def __eq__(self, other):
        if not isinstance(other, BandImage):
            return NotImplemented
        return self.slot_order == other.slot_order and np.array_equal(self.pixels, other.pixels)


def _finite_extrema(arrays):
    lo, hi = math.inf, -math.inf
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        a = a[np.isfinite(a)]
        if a.size:
            lo, hi = min(lo, float(a.min())), max(hi, float(a.max()))
    return lo, hi


def compute_range(aligned, modality=None) -> QuantizationRange:
    """Min/max distance over a whole aligned sequence.

    By default the range is shared by both modalities; pass ``"vision"`` or
    ``"wireless"`` for a single-modality range.
    """
    if modality is None:
        arrays = [*aligned.vision_signals.values(), *aligned.wireless_signals.values()]
    elif modality == "vision":
        arrays = list(aligned.vision_signals.values())
    elif modality == "wireless":
        arrays = list(aligned.wireless_signals.values())
    else:
        raise ValueError(f"unknown modality {modality!r}")
    lo, hi = _finite_extrema(arrays)
    if not math.isfinite(lo):
        raise DataError("no finite samples to compute a quantization range from")
    return QuantizationRange(lo, hi)


def quantize(value_m, rng: QuantizationRange):
    """Map distances to gray levels 0..255, clamping and rounding half up.

    Works on scalars and arrays; NaN (missing) maps to 0.
    """
    v = np.asarray(value_m, dtype=np.float64)
    frac = (np.clip(v, rng.min_m, rng.max_m) - rng.min_m) / (rng.max_m - rng.min_m)
    q = np.floor(255.0 * frac + 0.5)
    q = np.where(np.isnan(q), 0.0, q).astype(np.uint8)
    return int(q) if q.ndim == 0 else q


def render_band_image(signals, rng: QuantizationRange, band_h=BAND_H) -> BandImage:
    """Render ``[(entity_id, values), ...]`` top to bottom into one image.

    Missing (NaN) values paint 0 and count as ``rng.min_m`` in separators.
    """
    signals = list(signals)
    if not signals:
        raise DataError("need at least one signal")
    values = [np.asarray(v, dtype=np.float64) for _, v in signals]
    k = len(values[0])
    if k == 0 or any(v.shape != (k,) for v in values):
        raise DataError("all signals must be 1-D with the same non-zero length")
    n = len(values)
    img = np.empty(((2 * n - 1) * band_h, k), dtype=np.uint8)
    for i, v in enumerate(values):
        img[2 * i * band_h : (2 * i + 1) * band_h] = quantize(v, rng)
        if i + 1 < n:
            a = np.where(np.isnan(v), rng.min_m, v)
            b = np.where(np.isnan(values[i + 1]), rng.min_m, values[i + 1])
            img[(2 * i + 1) * band_h : (2 * i + 2) * band_h] = quantize((a + b) / 2.0, rng)
    return BandImage(img, [eid for eid, _ in signals], band_h)


def render_single_slotted(signal, rng: QuantizationRange, n_slots, entity_id="", band_h=BAND_H) -> BandImage:
    """Replicate one signal into ``n_slots`` bands, matching multi-signal geometry."""
    if n_slots < 1:
        raise DataError("n_slots must be >= 1")
    return render_band_image([(entity_id, signal)] * n_slots, rng, band_h)


def decode_band_image(img: BandImage, rng: QuantizationRange) -> list[np.ndarray]:
    """Approximate inverse of rendering: read the centre row of every band."""
    out = []
    for i in range(img.n_slots):
        row = img.pixels[2 * i * img.band_h + img.band_h // 2].astype(np.float64)
        out.append(rng.min_m + row / 255.0 * (rng.max_m - rng.min_m))
    return out


def slots_for_height(height, band_h=BAND_H):
    if height % band_h or (height // band_h) % 2 == 0:
        raise DataError(f"height {height} is not (2N-1)*{band_h}")
    return (height // band_h + 1) // 2


# -- binary PGM (P5) ---------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def write_pgm(path, img):
    """Write a BandImage or 2-D uint8 array as binary PGM, maxval 255."""
    px = img.pixels if isinstance(img, BandImage) else np.asarray(img, dtype=np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace byte before the raster
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
