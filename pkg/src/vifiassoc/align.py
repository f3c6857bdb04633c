"""Cross-modal temporal alignment of camera depth and FTM range traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError
from .signal_source import Modality, Scene, SignalTrace


@dataclass(frozen=True, eq=False)
class AlignedSequence:
    """Signals resampled onto the retained camera frames.

    Vision arrays hold NaN at frames where the entity was not detected;
    wireless arrays are dense.
    """

    timestamps_ms: np.ndarray
    vision_signals: dict[str, np.ndarray]
    wireless_signals: dict[str, np.ndarray]
    seq_id: str = ""

    def __post_init__(self):
        n = len(self.timestamps_ms)
        if n > 1 and np.any(np.diff(self.timestamps_ms) <= 0):
            raise DataError("aligned timestamps must be strictly increasing")
        for sig in (*self.vision_signals.values(), *self.wireless_signals.values()):
            if len(sig) != n:
                raise DataError("aligned signal length differs from timestamp count")

    def __len__(self):
        return len(self.timestamps_ms)

    @property
    def n_ftm(self):
        return len(self.wireless_signals)

    def as_scene(self) -> Scene:
        """Turn the aligned signals back into traces (missing frames dropped)."""
        ts = np.asarray(self.timestamps_ms)
        vision = []
        for eid, sig in sorted(self.vision_signals.items()):
            present = ~np.isnan(sig)
            vision.append(SignalTrace(eid, Modality.VISION, ts[present], sig[present]))
        wireless = [
            SignalTrace(eid, Modality.WIRELESS, ts, sig) for eid, sig in sorted(self.wireless_signals.items())
        ]
        return Scene(None, tuple(vision), tuple(wireless))


def _in_ranges(ts, valid_ranges):
    ts = np.asarray(ts)
    keep = np.zeros(ts.shape, dtype=bool)
    for start, end in valid_ranges:
        keep |= (ts >= start) & (ts <= end)
    return keep


def drop_invalid(trace: SignalTrace, valid_ranges) -> SignalTrace:
    """Keep only samples whose timestamp falls inside one of the closed ranges."""
    return trace.select(_in_ranges(trace.timestamps_ms, valid_ranges))


def subsample_frames(trace: SignalTrace, stride=4) -> SignalTrace:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return trace.select(slice(None, None, stride))


def interpolate_to(timestamps_ms, ftm_trace: SignalTrace) -> np.ndarray:
    """Linearly interpolate an FTM trace at the query times.

    Queries outside the FTM support take the nearest boundary value.
    """
    if len(ftm_trace) == 0:
        raise DataError(f"FTM trace {ftm_trace.entity_id!r} is empty")
    q = np.asarray(timestamps_ms, dtype=np.float64)
    return np.interp(q, ftm_trace.timestamps_ms.astype(np.float64), ftm_trace.values_m)


def load_valid_ranges(path):
    """Read a ``start_ms,end_ms`` CSV into a sorted list of ranges."""
    ranges = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["start_ms", "end_ms"]:
            raise ParseError("expected header start_ms,end_ms", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                start, end = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise ParseError("expected two numbers", line=lineno) from None
            if end < start:
                raise ParseError("end_ms before start_ms", line=lineno)
            ranges.append((start, end))
    ranges.sort()
    for (_, e0), (s1, _) in zip(ranges, ranges[1:]):
        if s1 <= e0:
            raise DataError(f"{Path(path).name}: validity ranges overlap")
    return ranges


def align_scene(scene: Scene, stride=4, valid_ranges=None, seq_id="") -> AlignedSequence:
    """Resample a scene onto every ``stride``-th valid camera frame.

    The camera frame clock is the union of all vision sample timestamps.
    ``valid_ranges=None`` keeps every frame.
    """
    for tr in scene.wireless_traces:
        if len(tr) == 0:
            raise DataError(f"FTM trace {tr.entity_id!r} is empty")
    stamps = [tr.timestamps_ms for tr in scene.vision_traces]
    frames = np.unique(np.concatenate(stamps)) if stamps else np.zeros(0, dtype=np.int64)
    if valid_ranges is not None:
        frames = frames[_in_ranges(frames, valid_ranges)]
    frames = frames[::stride]

    vision = {}
    for tr in scene.vision_traces:
        sig = np.full(frames.shape, np.nan)
        if len(tr):
            pos = np.searchsorted(tr.timestamps_ms, frames)
            pos_c = np.minimum(pos, len(tr) - 1)
            hit = tr.timestamps_ms[pos_c] == frames
            sig[hit] = tr.values_m[pos_c[hit]]
        if not np.all(np.isnan(sig)):
            vision[tr.entity_id] = sig
    wireless = {tr.entity_id: interpolate_to(frames, tr) for tr in scene.wireless_traces}
    return AlignedSequence(frames, vision, wireless, seq_id=seq_id)
