"""Command-line front end.

Every command is a pure function of its config file, seed and input files.
Exit codes: 0 success, 2 bad configuration, 3 bad input data.  Failures print
one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import evaluation as ev
from .errors import ConfigError, DataError
from .pairgen import WindowSpec, read_manifest, split_by_sequence, write_manifest
from .pipeline import build_dataset, run_benchmark, simulate_sequences
from .signal_source import DETECTOR_PRESETS, SceneConfig, WalkModel, load_traces, write_traces
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

RUN_DEFAULTS = {
    "k": 25,
    "stride": None,
    "frame_stride": 4,
    "neg_per_pos": 1,
    "test_fraction": 0.2,
    "n_sequences": 10,
    "n_train": 8,
    "n_test": 2,
    "ks": [10, 25, 50],
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
SCENE_KEYS = {f.name for f in fields(SceneConfig)} - {"walk", "rng_seed"}
WALK_KEYS = {"walk_" + f.name for f in fields(WalkModel)}


class RunConfig:
    """Flat JSON config split into scene, window, training and run options."""

    def __init__(self, raw: dict, seed: int):
        unknown = set(raw) - SCENE_KEYS - WALK_KEYS - TRAIN_KEYS - set(RUN_DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.seed = int(seed)
        self.run = {**RUN_DEFAULTS, **{k: v for k, v in raw.items() if k in RUN_DEFAULTS}}
        scene_kw = {k: v for k, v in raw.items() if k in SCENE_KEYS or k in WALK_KEYS}
        try:
            self.scene = SceneConfig.from_dict(scene_kw)
            self.scene.validate()
            self.train = TrainConfig(seed=self.seed, **{k: raw[k] for k in TRAIN_KEYS if k in raw})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, key):
        return self.run[key]

    @property
    def window(self):
        return WindowSpec(int(self.run["k"]), self.run["stride"])


def load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path.name}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path.name}: top level must be an object")
    seed = args.seed if args.seed is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (--seed or config key 'seed')")
    for flag in ("k", "epochs", "lr"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return RunConfig(raw, seed)


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_scene_dir(path):
    path = _require(path, "traces directory")
    files = sorted(p for p in path.glob("*.csv") if not p.stem.endswith("_assoc"))
    if not files:
        raise DataError(f"no trace CSVs in {path}")
    return {p.stem: load_traces(p) for p in files}


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# -- commands --------------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = simulate_sequences(cfg.scene, int(cfg["n_sequences"]), cfg.seed)
    for seq_id, scene in scenes.items():
        write_traces(scene, out / f"{seq_id}.csv")
    _emit({"sequences": sorted(scenes), "out": str(out)})


def cmd_build_dataset(args):
    cfg = load_config(args)
    scenes = _load_scene_dir(args.traces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = build_dataset(scenes, cfg.window, cfg.seed, int(cfg["frame_stride"]), int(cfg["neg_per_pos"]))
    split = split_by_sequence(sorted(scenes), pairs, float(cfg["test_fraction"]))
    write_manifest(split.train, out / "train.jsonl")
    write_manifest(split.test, out / "test.jsonl")
    _emit({"train_pairs": len(split.train), "test_pairs": len(split.test), "test_seqs": split.test_seqs})


def cmd_train(args):
    cfg = load_config(args)
    pairs = read_manifest(_require(args.manifest, "manifest"))
    ckpt = train(pairs, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    _emit({"checkpoint": str(out), "final_loss": ckpt.final_loss, "fingerprint": ckpt.fingerprint})


def cmd_eval(args):
    cfg = load_config(args)
    ckpt = load_checkpoint(_require(args.ckpt, "checkpoint"))
    mode = ev.MarginMode(args.margin_mode)
    fixed = None
    if mode is ev.MarginMode.FIXED:
        if not args.train_manifest:
            raise ConfigError("FixedFromTrain needs --train-manifest")
        fixed = ev.train_margin(read_manifest(_require(args.train_manifest, "train manifest")), ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.task == "pretext":
        if not args.manifest:
            raise ConfigError("pretext evaluation needs --manifest")
        points = ev.embed_pairs(read_manifest(_require(args.manifest, "manifest")), ckpt)
        report = ev.eval_pretext(None, ckpt, mode, fixed_margin=fixed, points=points)
        assignments = None
    else:
        if not args.traces:
            raise ConfigError("downstream evaluation needs --traces")
        scenes = _load_scene_dir(args.traces)
        spec = WindowSpec(ckpt.params.input_shape[1], cfg["stride"])
        points = ev.downstream_points(scenes, ckpt, spec, int(cfg["frame_stride"]))
        report, assignments = ev.eval_downstream(scenes, ckpt, spec, mode, fixed, points=points)

    ev.write_latent_csv(points, out / "latent.csv")
    if report is not None:
        ev.write_metrics_csv([report], out / "metrics.csv")
    if assignments is not None:
        with open(out / "assignments.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("seq", "t0_ms", "ftm_id", "vision_id", "distance"))
            for seq, t0, fid, vid, d in assignments:
                w.writerow((seq, t0, fid, vid, repr(d)))
    _emit({"metrics": None if report is None else dict(zip(ev.METRICS_HEADER, report.csv_row()))})


def _case_rows(variant, result):
    return [[variant, *r.csv_row()] for r in result.reports]


def cmd_case_study(args):
    cfg = load_config(args)
    rows = []
    ks = [int(k) for k in cfg["ks"]]
    common = dict(n_train=int(cfg["n_train"]), n_test=int(cfg["n_test"]), frame_stride=int(cfg["frame_stride"]))
    if args.which == "margin":
        for k in ks:
            res = run_benchmark(cfg.scene, k, cfg.seed, train_cfg=cfg.train, **common)
            rows.extend(_case_rows("", res))
    else:
        for name, (churn, dropout) in DETECTOR_PRESETS.items():
            scene = replace(cfg.scene, id_churn_prob=churn, dropout_prob=dropout)
            for k in ks:
                res = run_benchmark(scene, k, cfg.seed, train_cfg=cfg.train, **common)
                rows.extend(_case_rows(name, res))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"case_study_{args.which}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("variant", *ev.METRICS_HEADER))
        w.writerows(rows)
    _emit({"rows": len(rows), "out": str(path)})


# -- entry point -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vifiassoc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with flat keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        return p

    p = common(sub.add_parser("simulate", help="simulate trace CSVs"))
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("build-dataset", help="band-image pairs from trace CSVs"))
    p.add_argument("--traces", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_build_dataset)

    p = common(sub.add_parser("train", help="train the embedder on a manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=("pretext", "downstream"), default="pretext")
    p.add_argument("--margin-mode", choices=[m.value for m in ev.MarginMode], default=ev.MarginMode.VARIABLE.value)
    p.add_argument("--manifest", help="test manifest (pretext)")
    p.add_argument("--train-manifest", help="training manifest, for FixedFromTrain")
    p.add_argument("--traces", help="directory of test trace CSVs (downstream)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("case-study", help="margin-mode or detector-quality sweep over k"))
    p.add_argument("which", choices=("margin", "detector"))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_case_study)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    except DataError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
