"""Per-entity distance traces for the camera (depth) and WiFi FTM modalities.

Traces come either from :func:`simulate_scene`, a seeded pedestrian random-walk
simulator, or from CSV files via :func:`load_traces`.  A :class:`Scene` keeps
the wireless-to-vision association as ``ground_truth``; only evaluation code
reads it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DataError, ParseError

TRACE_HEADER = ("timestamp_ms", "entity_id", "modality", "value_m")
SIDECAR_HEADER = ("ftm_entity_id", "vision_entity_id")

# Noise can push a short range below zero; measured distances stay positive.
MIN_DISTANCE_M = 0.05


class Modality(str, Enum):
    VISION = "depth"
    WIRELESS = "ftm"


class SignalSample(NamedTuple):
    timestamp_ms: int
    value_m: float


@dataclass(frozen=True, eq=False)
class SignalTrace:
    """Timestamped distance samples of one entity in one modality."""

    entity_id: str
    modality: Modality
    timestamps_ms: np.ndarray
    values_m: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps_ms, dtype=np.int64).copy()
        vs = np.asarray(self.values_m, dtype=np.float64).copy()
        if ts.shape != vs.shape or ts.ndim != 1:
            raise DataError(f"trace {self.entity_id!r}: timestamps and values differ in shape")
        if ts.size and np.any(np.diff(ts) <= 0):
            raise DataError(f"trace {self.entity_id!r}: timestamps not strictly increasing")
        if ts.size and ts[0] < 0:
            raise DataError(f"trace {self.entity_id!r}: negative timestamp")
        if vs.size and not np.all(vs > 0):
            raise DataError(f"trace {self.entity_id!r}: distances must be positive")
        ts.flags.writeable = False
        vs.flags.writeable = False
        object.__setattr__(self, "timestamps_ms", ts)
        object.__setattr__(self, "values_m", vs)
        object.__setattr__(self, "modality", Modality(self.modality))

    def __len__(self):
        return int(self.timestamps_ms.size)

    def __iter__(self) -> Iterator[SignalSample]:
        for t, v in zip(self.timestamps_ms.tolist(), self.values_m.tolist()):
            yield SignalSample(t, v)

    def __eq__(self, other):
        if not isinstance(other, SignalTrace):
            return NotImplemented
        return (
            self.entity_id == other.entity_id
            and self.modality == other.modality
            and np.array_equal(self.timestamps_ms, other.timestamps_ms)
            and np.array_equal(self.values_m, other.values_m)
        )

    @property
    def samples(self) -> list[SignalSample]:
        return list(self)

    def select(self, mask) -> SignalTrace:
        return replace(self, timestamps_ms=self.timestamps_ms[mask], values_m=self.values_m[mask])


@dataclass(frozen=True)
class WalkModel:
    speed_min_mps: float = 0.6
    speed_max_mps: float = 1.6
    segment_min_s: float = 2.0
    segment_max_s: float = 6.0
    # walkable rectangle in front of the camera, meters
    x_min: float = -6.0
    x_max: float = 6.0
    y_min: float = 3.0
    y_max: float = 15.0


@dataclass(frozen=True)
class SceneConfig:
    duration_s: float = 180.0
    n_phone_holders: int = 3
    n_bystanders: int = 2
    camera_rate_hz: float = 10.0
    ftm_rate_hz: float = 3.0
    depth_noise_sigma_m: float = 0.2
    ftm_noise_sigma_m: float = 0.5
    id_churn_prob: float = 0.0
    dropout_prob: float = 0.0
    walk: WalkModel = field(default_factory=WalkModel)
    # Bystanders alternate between in-view and out-of-view spells with these
    # mean durations (exponential); absent mean 0 keeps them always in view.
    bystander_visible_mean_s: float = 30.0
    bystander_absent_mean_s: float = 0.0
    # access point position relative to the camera, meters
    ap_offset_m: tuple[float, float] = (0.0, 0.0)
    rng_seed: int = 0

    def validate(self):
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")
        if self.n_phone_holders < 1:
            raise ConfigError("n_phone_holders must be >= 1")
        if self.n_bystanders < 0:
            raise ConfigError("n_bystanders must be >= 0")
        if not self.camera_rate_hz > self.ftm_rate_hz > 0:
            raise ConfigError("need camera_rate_hz > ftm_rate_hz > 0")
        if self.depth_noise_sigma_m < 0 or self.ftm_noise_sigma_m < 0:
            raise ConfigError("noise sigmas must be >= 0")
        for name in ("id_churn_prob", "dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        w = self.walk
        if not (w.x_max > w.x_min and w.y_max > w.y_min):
            raise ConfigError("walkable area is empty")
        if not 0 < w.speed_min_mps <= w.speed_max_mps:
            raise ConfigError("invalid speed range")
        if self.bystander_visible_mean_s <= 0 or self.bystander_absent_mean_s < 0:
            raise ConfigError("bystander visibility means must be positive (absent may be 0)")
        if not 0 < w.segment_min_s <= w.segment_max_s:
            raise ConfigError("invalid segment duration range")

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        """Build from flat keys; ``walk_*`` keys go to :class:`WalkModel`."""
        known = {f for f in cls.__dataclass_fields__ if f != "walk"}
        walk_fields = set(WalkModel.__dataclass_fields__)
        kw, walk_kw = {}, {}
        for key, value in d.items():
            if key in known:
                kw[key] = tuple(value) if key == "ap_offset_m" else value
            elif key.startswith("walk_") and key[5:] in walk_fields:
                walk_kw[key[5:]] = value
        return cls(walk=WalkModel(**walk_kw), **kw)


@dataclass(frozen=True)
class Scene:
    config: SceneConfig | None
    vision_traces: tuple[SignalTrace, ...]
    wireless_traces: tuple[SignalTrace, ...]
    # wireless entity_id -> every vision entity_id belonging to that person;
    # evaluation only
    ground_truth: dict[str, frozenset[str]] | None = None

    def vision(self, entity_id) -> SignalTrace:
        return next(t for t in self.vision_traces if t.entity_id == entity_id)


def sample_times_ms(duration_s, rate_hz):
    period = round(1000.0 / rate_hz)
    n = math.floor(duration_s * rate_hz + 1e-9)
    return np.arange(n, dtype=np.int64) * period


def _fold(u, lo, hi):
    span = hi - lo
    m = np.mod(u - lo, 2.0 * span)
    return lo + np.where(m > span, 2.0 * span - m, m)


class _Trajectory:
    """Piecewise-constant-velocity walk, reflected at the area bounds."""

    def __init__(self, walk: WalkModel, duration_s, rng):
        start = np.array([rng.uniform(walk.x_min, walk.x_max), rng.uniform(walk.y_min, walk.y_max)])
        knots_t, knots_p, vels = [0.0], [start], []
        t, p = 0.0, start
        while t <= duration_s:
            heading = rng.uniform(0.0, 2.0 * math.pi)
            speed = rng.uniform(walk.speed_min_mps, walk.speed_max_mps)
            dur = rng.uniform(walk.segment_min_s, walk.segment_max_s)
            v = speed * np.array([math.cos(heading), math.sin(heading)])
            vels.append(v)
            t += dur
            p = p + v * dur
            knots_t.append(t)
            knots_p.append(p)
        self._t = np.array(knots_t)
        self._p = np.array(knots_p)
        self._v = np.array(vels)
        self._walk = walk

    def position(self, t_s):
        t_s = np.asarray(t_s, dtype=np.float64)
        seg = np.clip(np.searchsorted(self._t, t_s, side="right") - 1, 0, len(self._v) - 1)
        raw = self._p[seg] + self._v[seg] * (t_s - self._t[seg])[:, None]
        w = self._walk
        return np.stack([_fold(raw[:, 0], w.x_min, w.x_max), _fold(raw[:, 1], w.y_min, w.y_max)], axis=1)


def _visibility(times_ms, visible_mean_s, absent_mean_s, rng):
    """In-view mask from an alternating renewal process with a random start phase."""
    if absent_mean_s == 0:
        return np.ones(times_ms.shape, dtype=bool)
    start_visible = bool(rng.random() < visible_mean_s / (visible_mean_s + absent_mean_s))
    t_end_s = times_ms[-1] / 1000.0 if times_ms.size else 0.0
    edges, t, visible = [], 0.0, start_visible
    while t <= t_end_s:
        t += rng.exponential(visible_mean_s if visible else absent_mean_s)
        edges.append(t)
        visible = not visible
    flips = np.searchsorted(np.array(edges), times_ms / 1000.0, side="right")
    return (flips % 2 == 0) == start_visible


def _ranges(traj, times_ms, origin, sigma, rng):
    pos = traj.position(times_ms / 1000.0)
    dist = np.hypot(pos[:, 0] - origin[0], pos[:, 1] - origin[1])
    if sigma > 0:
        dist = dist + rng.normal(0.0, sigma, size=dist.shape)
    return np.maximum(dist, MIN_DISTANCE_M)


def simulate_scene(config: SceneConfig) -> Scene:
    """Simulate one sequence of walking people seen by a camera and an AP.

    Phone holders get both a depth and an FTM trace; bystanders only depth.
    Vision IDs are shuffled so their order says nothing about who holds a phone.
    """
    config.validate()
    n_people = config.n_phone_holders + config.n_bystanders
    root = np.random.SeedSequence(config.rng_seed)
    walk_seed, label_seed, view_seed, *person_seeds = root.spawn(3 + n_people)

    cam_t = sample_times_ms(config.duration_s, config.camera_rate_hz)
    ftm_t = sample_times_ms(config.duration_s, config.ftm_rate_hz)
    labels = np.random.default_rng(label_seed).permutation(n_people)
    walk_rng = np.random.default_rng(walk_seed)
    view_rng = np.random.default_rng(view_seed)
    trajectories = [_Trajectory(config.walk, config.duration_s, walk_rng) for _ in range(n_people)]

    vision, wireless, truth = [], [], {}
    for person, traj in enumerate(trajectories):
        noise_rng = np.random.default_rng(person_seeds[person])
        vid = f"trk{labels[person]:02d}"
        depth = _ranges(traj, cam_t, (0.0, 0.0), config.depth_noise_sigma_m, noise_rng)
        if person < config.n_phone_holders:
            vision.append(SignalTrace(vid, Modality.VISION, cam_t, depth))
        else:
            seen = _visibility(cam_t, config.bystander_visible_mean_s, config.bystander_absent_mean_s, view_rng)
            vision.append(SignalTrace(vid, Modality.VISION, cam_t[seen], depth[seen]))
        if person < config.n_phone_holders:
            fid = f"ftm{person:02d}"
            rng_m = _ranges(traj, ftm_t, config.ap_offset_m, config.ftm_noise_sigma_m, noise_rng)
            wireless.append(SignalTrace(fid, Modality.WIRELESS, ftm_t, rng_m))
            truth[fid] = frozenset({vid})
    vision.sort(key=lambda tr: tr.entity_id)
    scene = Scene(config, tuple(vision), tuple(wireless), truth)
    if config.id_churn_prob > 0 or config.dropout_prob > 0:
        scene = apply_detector_noise(scene, config.id_churn_prob, config.dropout_prob)
    return scene


DETECTOR_PRESETS = {
    "ground_truth": (0.0, 0.0),
    "corrected": (0.0, 0.05),
    "off_the_shelf": (0.002, 0.05),
}


def apply_detector_noise(scene: Scene, id_churn_prob, dropout_prob, seed=None) -> Scene:
    """Emulate an imperfect person detector on the vision traces.

    Each frame a track may be handed a fresh ID for the rest of its samples
    (probability ``id_churn_prob``), and samples vanish independently with
    probability ``dropout_prob``.  ``ground_truth`` follows the fragments.
    """
    if not (0.0 <= id_churn_prob <= 1.0 and 0.0 <= dropout_prob <= 1.0):
        raise ConfigError("probabilities must lie in [0, 1]")
    if id_churn_prob == 0 and dropout_prob == 0:
        return scene
    if seed is None:
        seed = scene.config.rng_seed if scene.config is not None else 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    taken = {t.entity_id for t in scene.vision_traces}
    fragments_of = {}
    out = []
    for trace in scene.vision_traces:
        n = len(trace)
        starts = np.flatnonzero(rng.random(n) < id_churn_prob)
        starts = starts[starts > 0]
        keep = rng.random(n) >= dropout_prob
        bounds = [0, *starts.tolist(), n]
        ids = []
        for j, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            fid = trace.entity_id
            if j:
                fid = f"{trace.entity_id}.{j}"
                while fid in taken:
                    fid += "'"
            taken.add(fid)
            ids.append(fid)
            mask = np.zeros(n, dtype=bool)
            mask[lo:hi] = keep[lo:hi]
            out.append(replace(trace.select(mask), entity_id=fid))
        fragments_of[trace.entity_id] = ids
    out.sort(key=lambda tr: tr.entity_id)

    truth = None
    if scene.ground_truth is not None:
        truth = {
            w: frozenset(f for v in vs for f in fragments_of.get(v, [v]))
            for w, vs in scene.ground_truth.items()
        }
    return replace(scene, vision_traces=tuple(out), ground_truth=truth)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_assoc.csv")


def write_traces(scene: Scene, path):
    """Write ``scene`` as a trace CSV plus, if known, its association sidecar."""
    path = Path(path)
    rows = []
    for tr in (*scene.vision_traces, *scene.wireless_traces):
        for t, v in zip(tr.timestamps_ms.tolist(), tr.values_m.tolist()):
            rows.append((t, tr.entity_id, tr.modality.value, repr(v)))
    rows.sort(key=lambda r: (r[0], r[2], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(rows)
    if scene.ground_truth is not None:
        with open(sidecar_path(path), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SIDECAR_HEADER)
            for fid in sorted(scene.ground_truth):
                for vid in sorted(scene.ground_truth[fid]):
                    w.writerow((fid, vid))


def _read_sidecar(path):
    truth: dict[str, set[str]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SIDECAR_HEADER:
            raise ParseError(f"expected header {','.join(SIDECAR_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError("expected 2 fields", line=lineno)
            truth.setdefault(row[0], set()).add(row[1])
    return {k: frozenset(v) for k, v in truth.items()}


def load_traces(path, sidecar=None) -> Scene:
    """Read a trace CSV (``timestamp_ms,entity_id,modality,value_m``).

    The association sidecar defaults to ``<stem>_assoc.csv`` next to the file
    and is optional.
    """
    path = Path(path)
    groups: dict[tuple[str, Modality], list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise ParseError(f"expected header {','.join(TRACE_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                t = int(row[0])
                modality = Modality(row[2].strip())
                v = float(row[3])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if t < 0:
                raise ParseError("negative timestamp_ms", line=lineno)
            if not (v > 0 and math.isfinite(v)):
                raise ParseError("value_m must be a positive finite number", line=lineno)
            groups.setdefault((row[1], modality), []).append((t, v))

    vision, wireless = [], []
    for (eid, modality), samples in sorted(groups.items(), key=lambda kv: (kv[0][1].value, kv[0][0])):
        samples.sort(key=lambda s: s[0])
        ts = np.array([s[0] for s in samples], dtype=np.int64)
        if np.any(np.diff(ts) == 0):
            raise DataError(f"trace {eid!r} ({modality.value}): duplicate timestamp")
        trace = SignalTrace(eid, modality, ts, np.array([s[1] for s in samples]))
        (vision if modality is Modality.VISION else wireless).append(trace)

    sidecar = sidecar_path(path) if sidecar is None else Path(sidecar)
    truth = _read_sidecar(sidecar) if sidecar.exists() else None
    return Scene(None, tuple(vision), tuple(wireless), truth)
