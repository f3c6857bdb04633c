"""End-to-end wiring: simulate, align, build pairs, train, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluation as ev
from .align import align_scene
from .pairgen import WindowSpec, build_pairs
from .signal_source import SceneConfig, simulate_scene
from .train import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

# Synthetic benchmark scene: 3 phone holders and 2 passers-by who cross the
# view for ~12 s roughly every two minutes.
BENCHMARK_SCENE = SceneConfig(
    duration_s=180.0,
    n_phone_holders=3,
    n_bystanders=2,
    depth_noise_sigma_m=0.2,
    ftm_noise_sigma_m=0.5,
    bystander_visible_mean_s=12.0,
    bystander_absent_mean_s=120.0,
)


def sequence_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def simulate_sequences(base: SceneConfig, n, seed, prefix="seq"):
    """``n`` scenes with independent seeds derived from ``seed``; keyed by sequence id."""
    return {
        f"{prefix}{i:03d}": simulate_scene(replace(base, rng_seed=sequence_seed(seed, i))) for i in range(n)
    }


def build_dataset(scenes, spec: WindowSpec, seed, frame_stride=4, neg_per_pos=1):
    """Pairs for every scene, in sequence order, from one seeded generator."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    pairs = []
    for seq_id in sorted(scenes):
        aligned = align_scene(scenes[seq_id], frame_stride, seq_id=seq_id)
        pairs.extend(build_pairs(aligned, spec, rng, neg_per_pos))
    return pairs


@dataclass
class BenchmarkResult:
    checkpoint: Checkpoint
    pretext: ev.MetricsReport
    downstream: ev.MetricsReport
    train_margin: ev.MarginLine
    hit_rate: float
    reports: list = field(default_factory=list)


def run_benchmark(
    scene_cfg: SceneConfig,
    k,
    seed,
    n_train=8,
    n_test=2,
    train_cfg: TrainConfig | None = None,
    frame_stride=4,
) -> BenchmarkResult:
    """Train on simulated sequences and score held-out ones under both margin modes."""
    train_cfg = train_cfg or TrainConfig(seed=seed)
    spec = WindowSpec(k)
    train_scenes = simulate_sequences(scene_cfg, n_train, seed, prefix="train")
    test_scenes = simulate_sequences(scene_cfg, n_test, seed + 7919, prefix="test")
    train_pairs = build_dataset(train_scenes, spec, seed, frame_stride)
    test_pairs = build_dataset(test_scenes, spec, seed + 1, frame_stride)
    log.info("k=%d: %d train pairs, %d test pairs", k, len(train_pairs), len(test_pairs))

    ckpt = train(train_pairs, train_cfg)
    margin = ev.train_margin(train_pairs, ckpt)
    pre_pts = ev.embed_pairs(test_pairs, ckpt)
    down_pts = ev.downstream_points(test_scenes, ckpt, spec, frame_stride)

    reports = []
    for mode in (ev.MarginMode.FIXED, ev.MarginMode.VARIABLE):
        reports.append(ev.eval_pretext(test_pairs, ckpt, mode, fixed_margin=margin, points=pre_pts))
        rep, _ = ev.eval_downstream(test_scenes, ckpt, spec, mode, fixed_margin=margin, points=down_pts)
        reports.append(rep)
    return BenchmarkResult(
        ckpt,
        reports[2],
        reports[3],
        margin,
        ev.min_distance_hit_rate(down_pts),
        reports,
    )
