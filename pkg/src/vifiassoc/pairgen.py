"""Self-supervised pair generation from aligned sequences.

Labels come from window timestamps alone: a vision band image and a wireless
band image cut from the same window form a positive pair (label 1), images
from different windows a negative pair (label 0).  Nothing here knows which
vision track belongs to which phone.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import AlignedSequence
from .bandcodec import BandImage, QuantizationRange, compute_range, read_pgm, render_band_image, slots_for_height, write_pgm
from .errors import ConfigError, DataError

DEFAULT_MIN_STD_M = 0.05
DEFAULT_MIN_PRESENCE = 0.8
SLOT_ORDERS = ("mean", "id")


@dataclass(frozen=True)
class WindowSpec:
    k: int = 25
    stride: int | None = None  # None -> k (disjoint windows)

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("window k must be >= 2")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("window stride must be >= 1")

    @property
    def step(self):
        return self.k if self.stride is None else self.stride


@dataclass(frozen=True, eq=False)
class Window:
    seq_id: str
    start: int  # index into the aligned frames
    timestamps_ms: np.ndarray
    vision: dict[str, np.ndarray]
    wireless: dict[str, np.ndarray]

    @property
    def t0(self):
        return int(self.timestamps_ms[0])

    @property
    def k(self):
        return len(self.timestamps_ms)


@dataclass(frozen=True, eq=False)
class PairExample:
    vision_img: BandImage
    wireless_img: BandImage
    label_y: int
    seq: str
    w_vision: int  # window start timestamps, ms
    w_wireless: int

    def __post_init__(self):
        if self.vision_img.pixels.shape != self.wireless_img.pixels.shape:
            raise DataError("pair images differ in shape")
        if self.label_y not in (0, 1):
            raise DataError("label must be 0 or 1")


@dataclass
class DatasetSplit:
    train: list[PairExample]
    test: list[PairExample]
    train_seqs: list[str]
    test_seqs: list[str]


def window_sequence(aligned: AlignedSequence, spec: WindowSpec) -> list[Window]:
    n = len(aligned)
    windows = []
    for s in range(0, n - spec.k + 1, spec.step):
        sl = slice(s, s + spec.k)
        windows.append(
            Window(
                aligned.seq_id,
                s,
                aligned.timestamps_ms[sl],
                {e: v[sl] for e, v in aligned.vision_signals.items()},
                {e: v[sl] for e, v in aligned.wireless_signals.items()},
            )
        )
    return windows


def active_tracks(window: Window, min_std_m=DEFAULT_MIN_STD_M, min_presence=DEFAULT_MIN_PRESENCE):
    """Vision tracks present often enough and moving enough to be useful."""
    keep = []
    for eid, v in window.vision.items():
        present = v[~np.isnan(v)]
        if present.size == 0 or present.size < min_presence * window.k:
            continue
        std = float(np.std(present, ddof=1)) if present.size > 1 else 0.0
        if std >= min_std_m:
            keep.append(eid)
    return sorted(keep)


def candidate_combinations(active, n_ftm):
    if n_ftm < 1:
        raise ConfigError("n_ftm must be >= 1")
    return [tuple(c) for c in itertools.combinations(sorted(active), n_ftm)]


def select_combination(combos, rng):
    if not combos:
        raise DataError("no candidate combinations to choose from")
    return combos[int(rng.integers(len(combos)))]


def order_slots(signals, slot_order="mean"):
    """Top-to-bottom band order: nearest window-mean distance first, or by entity id.

    Mean ordering puts the same people in the same slots on both sides of a
    synchronized pair without looking at any association.
    """
    signals = sorted(signals, key=lambda s: s[0])
    if slot_order == "id":
        return signals
    if slot_order != "mean":
        raise ConfigError(f"unknown slot order {slot_order!r}; expected one of {SLOT_ORDERS}")
    return sorted(signals, key=lambda s: (float(np.nanmean(s[1])), s[0]))


def vision_image(window: Window, ids, qrange, slot_order="mean") -> BandImage:
    return render_band_image(order_slots([(e, window.vision[e]) for e in ids], slot_order), qrange)


def wireless_image(window: Window, qrange: QuantizationRange, slot_order="mean") -> BandImage:
    return render_band_image(order_slots(window.wireless.items(), slot_order), qrange)


def build_pairs(
    aligned: AlignedSequence,
    spec: WindowSpec,
    rng,
    neg_per_pos=1,
    qrange=None,
    min_std_m=DEFAULT_MIN_STD_M,
    min_presence=DEFAULT_MIN_PRESENCE,
    per_modality_range=False,
    slot_order="mean",
) -> list[PairExample]:
    """Emit one positive and ``neg_per_pos`` negatives per feasible window.

    A window is feasible when it has at least as many active vision tracks as
    there are FTM devices.  Negatives pair the window's vision image with the
    wireless image of another feasible window of the same sequence.
    """
    n_ftm = aligned.n_ftm
    if n_ftm < 1:
        raise DataError(f"sequence {aligned.seq_id!r} has no FTM signals")
    if per_modality_range:
        vis_range, wl_range = compute_range(aligned, "vision"), compute_range(aligned, "wireless")
    else:
        vis_range = wl_range = qrange if qrange is not None else compute_range(aligned)

    feasible = []  # (window, vision image, wireless image)
    for w in window_sequence(aligned, spec):
        combos = candidate_combinations(active_tracks(w, min_std_m, min_presence), n_ftm)
        if not combos:
            continue
        chosen = select_combination(combos, rng)
        v_img = vision_image(w, chosen, vis_range, slot_order)
        feasible.append((w, v_img, wireless_image(w, wl_range, slot_order)))
    if len(feasible) < 2:
        raise DataError(f"sequence {aligned.seq_id!r}: {len(feasible)} feasible windows, need >= 2 for negatives")

    pairs = []
    for i, (w, v_img, w_img) in enumerate(feasible):
        pairs.append(PairExample(v_img, w_img, 1, aligned.seq_id, w.t0, w.t0))
        others = [j for j in range(len(feasible)) if j != i]
        picks = rng.choice(others, size=neg_per_pos, replace=neg_per_pos > len(others))
        for j in picks:
            wj, _, wj_img = feasible[int(j)]
            pairs.append(PairExample(v_img, wj_img, 0, aligned.seq_id, w.t0, wj.t0))
    return pairs


def split_by_sequence(seq_ids, pairs, test_fraction) -> DatasetSplit:
    """Assign whole sequences to train or test; the last ones (sorted) go to test."""
    seqs = sorted(set(seq_ids))
    if len(seqs) < 2:
        raise DataError("need at least two sequences to split")
    n_test = min(max(1, math.floor(len(seqs) * test_fraction + 0.5)), len(seqs) - 1)
    test_seqs = seqs[len(seqs) - n_test :]
    train_seqs = seqs[: len(seqs) - n_test]
    test_set = set(test_seqs)
    return DatasetSplit(
        [p for p in pairs if p.seq not in test_set],
        [p for p in pairs if p.seq in test_set],
        train_seqs,
        test_seqs,
    )


def dataset_fingerprint(pairs) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(f"{p.seq}|{p.w_vision}|{p.w_wireless}|{p.label_y}|{p.vision_img.pixels.shape}".encode())
        h.update(p.vision_img.pixels.tobytes())
        h.update(p.wireless_img.pixels.tobytes())
    return h.hexdigest()


# -- on-disk manifest ----------------------------------------------------------


def _pgm_name(seq, t0, modality):
    return f"{seq}_{t0}_{modality}.pgm"


def write_manifest(pairs, path, image_dir=None):
    """Write PGM images and a JSON-lines manifest, one record per pair."""
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    written = set()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            v_name = _pgm_name(p.seq, p.w_vision, "depth")
            w_name = _pgm_name(p.seq, p.w_wireless, "ftm")
            for name, img in ((v_name, p.vision_img), (w_name, p.wireless_img)):
                if name not in written:
                    write_pgm(image_dir / name, img)
                    written.add(name)
            record = {
                "vision_pgm": os.path.relpath(image_dir / v_name, path.parent),
                "wireless_pgm": os.path.relpath(image_dir / w_name, path.parent),
                "label": p.label_y,
                "seq": p.seq,
                "w_vision": p.w_vision,
                "w_wireless": p.w_wireless,
            }
            f.write(json.dumps(record) + "\n")


def read_manifest(path) -> list[PairExample]:
    path = Path(path)
    pairs = []
    cache = {}

    def load(rel):
        p = (path.parent / rel) if not Path(rel).is_absolute() else Path(rel)
        if p not in cache:
            px = read_pgm(p)
            cache[p] = BandImage(px, [""] * slots_for_height(px.shape[0]))
        return cache[p]

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                pairs.append(
                    PairExample(
                        load(r["vision_pgm"]),
                        load(r["wireless_pgm"]),
                        int(r["label"]),
                        str(r["seq"]),
                        int(r["w_vision"]),
                        int(r["w_wireless"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path.name} line {lineno}: {exc}") from None
    return pairs
