"""Latent-space evaluation: margin line, IDP/accuracy/F1, downstream association.

A pair is predicted positive when its embedding distance lies strictly below
the margin line threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import nn
from .align import align_scene
from .bandcodec import BandImage, compute_range, render_single_slotted, slots_for_height
from .errors import DataError
from .pairgen import DEFAULT_MIN_PRESENCE, DEFAULT_MIN_STD_M, WindowSpec, active_tracks, window_sequence
from .signal_source import Scene

METRICS_HEADER = ("task", "k", "margin_mode", "threshold", "idtp", "idfp", "idtn", "idfn", "idp", "acc", "f1")


class MarginMode(str, Enum):
    VARIABLE = "VariableOnTest"
    FIXED = "FixedFromTrain"


@dataclass(frozen=True)
class LatentPoint:
    distance: float
    label_y: int | None  # None when no ground truth is available
    meta: tuple


@dataclass(frozen=True)
class MarginLine:
    threshold: float

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError("margin threshold must be >= 0")

    def predicts_positive(self, distance):
        return distance < self.threshold


@dataclass(frozen=True)
class MetricsReport:
    idtp: int
    idfp: int
    idtn: int
    idfn: int
    idp: float  # NaN when nothing is predicted positive
    accuracy: float
    f1: float
    margin_used: MarginLine
    task: str = "pretext"
    window_k: int | None = None
    margin_mode: str = MarginMode.VARIABLE.value

    @property
    def total(self):
        return self.idtp + self.idfp + self.idtn + self.idfn

    @property
    def recall(self):
        pos = self.idtp + self.idfn
        return self.idtp / pos if pos else math.nan

    def csv_row(self):
        def fmt(x):
            return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"

        return [
            self.task,
            "" if self.window_k is None else str(self.window_k),
            self.margin_mode,
            f"{self.margin_used.threshold:.9f}",
            str(self.idtp),
            str(self.idfp),
            str(self.idtn),
            str(self.idfn),
            fmt(self.idp),
            fmt(self.accuracy),
            fmt(self.f1),
        ]


def _split(points):
    d = np.array([p.distance for p in points], dtype=np.float64)
    y = np.array([p.label_y for p in points])
    return d, y


def _candidates(distances):
    u = np.unique(distances)
    return np.concatenate([[0.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


def sweep_margin_line(points, objective="accuracy") -> MarginLine:
    """Best-accuracy threshold over midpoints of sorted distinct distances.

    Ties go to the smallest threshold.
    """
    if objective.lower() != "accuracy":
        raise ValueError(f"unsupported objective {objective!r}")
    d, y = _split(points)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DataError("margin sweep needs both positive and negative points")
    cand = _candidates(d)
    pos = np.sort(d[y == 1])
    neg = np.sort(d[y == 0])
    tp = np.searchsorted(pos, cand, side="left")
    tn = neg.size - np.searchsorted(neg, cand, side="left")
    best = int(np.argmax(tp + tn))
    return MarginLine(float(cand[best]))


def compute_metrics(points, margin: MarginLine, task="pretext", window_k=None, margin_mode=MarginMode.VARIABLE):
    d, y = _split(points)
    pred = d < margin.threshold
    idtp = int(np.sum(pred & (y == 1)))
    idfp = int(np.sum(pred & (y == 0)))
    idtn = int(np.sum(~pred & (y == 0)))
    idfn = int(np.sum(~pred & (y == 1)))
    total = idtp + idfp + idtn + idfn
    idp = idtp / (idtp + idfp) if idtp + idfp else math.nan
    recall = idtp / (idtp + idfn) if idtp + idfn else math.nan
    if math.isnan(idp) or math.isnan(recall):
        f1 = math.nan
    elif idp + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * idp * recall / (idp + recall)
    acc = (idtp + idtn) / total if total else math.nan
    return MetricsReport(
        idtp, idfp, idtn, idfn, idp, acc, f1, margin, task, window_k, MarginMode(margin_mode).value
    )


def _distances(vision_imgs, wireless_imgs, params):
    """Embed each distinct image once, then measure per-pair distances."""
    uniq, index = [], {}
    def slot(img):
        key = id(img)
        if key not in index:
            index[key] = len(uniq)
            uniq.append(img)
        return index[key]
    vi = [slot(im) for im in vision_imgs]
    wi = [slot(im) for im in wireless_imgs]
    emb = nn.embed_batch(uniq, params).astype(np.float64)
    return nn.euclidean_distance(emb[vi], emb[wi])


def embed_pairs(pairs, ckpt) -> list[LatentPoint]:
    if not pairs:
        return []
    ckpt.require_geometry(pairs[0].vision_img.pixels.shape)
    d = _distances([p.vision_img for p in pairs], [p.wireless_img for p in pairs], ckpt.params)
    return [
        LatentPoint(float(dist), p.label_y, (p.seq, p.w_vision, p.w_wireless)) for dist, p in zip(d, pairs)
    ]


def _margin_for(points, margin_mode, fixed_margin):
    if MarginMode(margin_mode) is MarginMode.FIXED:
        if fixed_margin is None:
            raise DataError("FixedFromTrain needs the margin line swept on the training set")
        return fixed_margin
    return sweep_margin_line(points)


def train_margin(train_pairs, ckpt) -> MarginLine:
    return sweep_margin_line(embed_pairs(train_pairs, ckpt))


def eval_pretext(test_pairs, ckpt, margin_mode=MarginMode.VARIABLE, fixed_margin=None, train_pairs=None, points=None):
    """Scene-wide synchronization metrics on held-out pairs.

    For ``FixedFromTrain`` pass either ``fixed_margin`` or ``train_pairs``.
    """
    if points is None:
        points = embed_pairs(test_pairs, ckpt)
    if not points:
        raise DataError("no test pairs")
    if MarginMode(margin_mode) is MarginMode.FIXED and fixed_margin is None and train_pairs is not None:
        fixed_margin = train_margin(train_pairs, ckpt)
    margin = _margin_for(points, margin_mode, fixed_margin)
    k = ckpt.params.input_shape[1]
    return compute_metrics(points, margin, "pretext", k, margin_mode)


# -- downstream one-to-one association -----------------------------------------


def _scenes(scenes):
    if isinstance(scenes, Scene):
        return [("seq0", scenes)]
    if isinstance(scenes, dict):
        return sorted(scenes.items())
    return [(f"seq{i}", s) for i, s in enumerate(scenes)]


def downstream_points(
    scenes,
    ckpt,
    spec: WindowSpec | None = None,
    frame_stride=4,
    valid_ranges=None,
    min_std_m=DEFAULT_MIN_STD_M,
    min_presence=DEFAULT_MIN_PRESENCE,
) -> list[LatentPoint]:
    """Distance of every (active vision track, FTM device) pair in every window.

    Each signal is rendered alone, replicated into all slots of the trained
    geometry.  Labels come from ``Scene.ground_truth`` when present.
    """
    height, k = ckpt.params.input_shape
    if spec is None:
        spec = WindowSpec(k)
    elif spec.k != k:
        ckpt.require_geometry((height, spec.k))
    n_slots = slots_for_height(height)
    points = []
    for seq_id, scene in _scenes(scenes):
        aligned = align_scene(scene, frame_stride, valid_ranges, seq_id)
        truth = scene.ground_truth
        qrange = compute_range(aligned)
        for w in window_sequence(aligned, spec):
            active = active_tracks(w, min_std_m, min_presence)
            if not active:
                continue
            ftm_ids = sorted(w.wireless)
            v_imgs = [render_single_slotted(w.vision[e], qrange, n_slots, e) for e in active]
            w_imgs = [render_single_slotted(w.wireless[f], qrange, n_slots, f) for f in ftm_ids]
            emb = nn.embed_batch(v_imgs + w_imgs, ckpt.params).astype(np.float64)
            ev, ew = emb[: len(active)], emb[len(active) :]
            for fi, f in enumerate(ftm_ids):
                d = nn.euclidean_distance(ev, ew[fi])
                for ei, e in enumerate(active):
                    label = None if truth is None else int(e in truth.get(f, ()))
                    points.append(LatentPoint(float(d[ei]), label, (seq_id, w.t0, e, f)))
    return points


def greedy_assignments(points):
    """One-to-one matching per window, repeatedly taking the closest free pair."""
    by_window = {}
    for p in points:
        seq, t0, e, f = p.meta
        by_window.setdefault((seq, t0), []).append((p.distance, f, e))
    out = []
    for (seq, t0), cands in sorted(by_window.items()):
        used_v, used_w = set(), set()
        for d, f, e in sorted(cands):
            if f in used_w or e in used_v:
                continue
            used_v.add(e)
            used_w.add(f)
            out.append((seq, t0, f, e, d))
    return out


def min_distance_hit_rate(points):
    """Fraction of (window, FTM device) groups whose closest vision track is a true match.

    Groups where no true match is among the active tracks are skipped.
    """
    groups = {}
    for p in points:
        seq, t0, e, f = p.meta
        groups.setdefault((seq, t0, f), []).append(p)
    hits = total = 0
    for members in groups.values():
        if not any(m.label_y == 1 for m in members):
            continue
        total += 1
        best = min(members, key=lambda m: (m.distance, m.meta[2]))
        hits += best.label_y == 1
    return hits / total if total else math.nan


def eval_downstream(scenes, ckpt, spec=None, margin_mode=MarginMode.VARIABLE, fixed_margin=None, points=None, **kw):
    """Score downstream association; returns ``(report or None, assignments)``.

    Without ground truth the report is None but assignments are still made.
    """
    if points is None:
        points = downstream_points(scenes, ckpt, spec, **kw)
    assignments = greedy_assignments(points)
    if not points or any(p.label_y is None for p in points):
        return None, assignments
    margin = _margin_for(points, margin_mode, fixed_margin)
    return compute_metrics(points, margin, "downstream", ckpt.params.input_shape[1], margin_mode), assignments


# -- learned slot-order tolerance ------------------------------------------------


def permute_slots(img: BandImage, order) -> BandImage:
    """Reorder the signal bands of an image.

    Separators between bands that were already neighbours are kept; new
    neighbours get the rounded pixel mean.
    """
    h = img.band_h
    bands = [img.pixels[2 * i * h : (2 * i + 1) * h].astype(np.int32) for i in range(img.n_slots)]
    seps = [img.pixels[(2 * i + 1) * h : (2 * i + 2) * h].astype(np.int32) for i in range(img.n_slots - 1)]
    order = list(order)
    rows = []
    for pos, i in enumerate(order):
        rows.append(bands[i])
        if pos + 1 < len(order):
            j = order[pos + 1]
            rows.append(seps[min(i, j)] if abs(i - j) == 1 else (bands[i] + bands[j] + 1) // 2)
    return BandImage(np.vstack(rows).astype(np.uint8), [img.slot_order[i] for i in order], h)


def slot_permutation_flip_rate(pairs, ckpt, margin: MarginLine):
    """Share of positive pairs whose predicted class changes when their
    vision bands are reversed."""
    pos = [p for p in pairs if p.label_y == 1]
    if not pos:
        return math.nan
    rev = list(range(pos[0].vision_img.n_slots))[::-1]
    d0 = _distances([p.vision_img for p in pos], [p.wireless_img for p in pos], ckpt.params)
    d1 = _distances([permute_slots(p.vision_img, rev) for p in pos], [p.wireless_img for p in pos], ckpt.params)
    return float(np.mean((d0 < margin.threshold) != (d1 < margin.threshold)))


# -- CSV export -------------------------------------------------------------------


def write_metrics_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def write_latent_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("distance", "label", "meta"))
        for p in points:
            w.writerow((repr(p.distance), "" if p.label_y is None else p.label_y, "|".join(map(str, p.meta))))
