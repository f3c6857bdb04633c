"""Pretext (synchronization) training loop and checkpoint persistence."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DataError, GeometryError
from .pairgen import dataset_fingerprint

log = logging.getLogger(__name__)

MAGIC = b"VIFC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    lr: float = 0.003
    margin: float = 0.2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")


@dataclass
class Checkpoint:
    params: nn.ModelParams
    train_config: TrainConfig
    fingerprint: str
    epoch: int
    final_loss: float
    loss_history: list[float] = field(default_factory=list)

    @property
    def arch(self):
        return self.params.arch

    def require_geometry(self, shape):
        if tuple(shape) != self.params.input_shape:
            raise GeometryError(
                f"checkpoint expects {self.params.input_shape[1]}x{self.params.input_shape[0]} (WxH) "
                f"band images, got {shape[1]}x{shape[0]}; retrain for this window size / FTM count"
            )


def _stack(images, dtype):
    out = np.empty((len(images), 1, *images[0].pixels.shape), dtype=dtype)
    for i, img in enumerate(images):
        out[i, 0] = img.pixels
    out /= dtype(255.0)
    return out


def train(dataset, cfg: TrainConfig, params: nn.ModelParams | None = None, progress=None) -> Checkpoint:
    """Fit the siamese embedder on labelled pairs with SGD.

    Every epoch visits the pairs in a seeded random order; the last batch may
    be short and is averaged over its true size.
    """
    if not dataset:
        raise DataError("training set is empty")
    shape = dataset[0].vision_img.pixels.shape
    for i, p in enumerate(dataset):
        if p.vision_img.pixels.shape != shape or p.wireless_img.pixels.shape != shape:
            raise GeometryError(f"pair {i} has image shape {p.vision_img.pixels.shape}, expected {shape}")
    if params is None:
        params = nn.init_params(shape, cfg.seed)
    elif params.input_shape != shape:
        raise GeometryError(f"initial params built for {params.input_shape}, data is {shape}")
    dtype = next(iter(params.tensors.values())).dtype.type

    vis = _stack([p.vision_img for p in dataset], dtype)
    wl = _stack([p.wireless_img for p in dataset], dtype)
    labels = np.array([p.label_y for p in dataset], dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = len(dataset)

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads, _ = nn.siamese_loss_and_grads(params, vis[idx], wl[idx], labels[idx], cfg.margin)
            params = nn.sgd_step(params, grads, cfg.lr)
            total += loss * len(idx)
        history.append(total / n)
        if progress is not None:
            progress(epoch, history[-1])
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.6f", epoch, history[-1])

    return Checkpoint(params, cfg, dataset_fingerprint(dataset), cfg.epochs, history[-1], history)


def loss_csv_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_loss.csv")


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary little-endian layout: magic, u32 version, u32 header length,
    JSON header, then float32 tensors in header order."""
    path = Path(path)
    tensors = ckpt.params.tensors
    header = {
        "arch": ckpt.params.arch,
        "train_config": asdict(ckpt.train_config),
        "fingerprint": ckpt.fingerprint,
        "epoch": ckpt.epoch,
        "final_loss": ckpt.final_loss,
        "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for t in tensors.values():
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    if ckpt.loss_history:
        with open(loss_csv_path(path), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("epoch", "loss"))
            for i, loss in enumerate(ckpt.loss_history):
                w.writerow((i, repr(float(loss))))


def load_checkpoint(path, expect_shape=None) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError(f"{path.name}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path.name}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise DataError(f"{path.name}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise DataError(f"{path.name}: corrupt header ({exc})") from None
    pos = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(data):
            raise DataError(f"{path.name}: truncated while reading tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos = end
    if pos != len(data):
        raise DataError(f"{path.name}: {len(data) - pos} trailing bytes")

    history = []
    lpath = loss_csv_path(path)
    if lpath.exists():
        with open(lpath, newline="", encoding="utf-8") as f:
            history = [float(r["loss"]) for r in csv.DictReader(f)]
    ckpt = Checkpoint(
        nn.ModelParams(header["arch"], tensors),
        TrainConfig(**header["train_config"]),
        header["fingerprint"],
        header["epoch"],
        header["final_loss"],
        history,
    )
    if expect_shape is not None:
        ckpt.require_geometry(expect_shape)
    return ckpt
