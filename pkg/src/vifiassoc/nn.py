"""Small numpy neural-network kernels for the siamese band-image embedder.

Tensors are plain ``numpy.ndarray`` in NCHW layout.  Every layer is a
``*_forward`` returning ``(out, cache)`` and a ``*_backward`` taking the
upstream gradient and that cache.  Kernels are dtype-generic: training runs in
float32, gradient checks in float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, GeometryError

EMBED_DIM = 256

DEFAULT_LAYERS = (
    {"type": "conv", "out": 16, "k": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "conv", "out": 32, "k": 3, "pad": 1},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "conv", "out": 64, "k": 3, "pad": 1},
    {"type": "relu"},
    {"type": "dense", "out": EMBED_DIM},
    {"type": "l2norm"},
)


# -- layers ------------------------------------------------------------------


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw), zero padded."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DataError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DataError(f"conv2d output would be empty for input {x.shape} and kernel {w.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, pad = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (dmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2x2_forward(x):
    """2x2/stride 2 max pooling; odd trailing rows/columns are dropped.

    Ties go to the first maximum in row-major order within the window.
    """
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise DataError(f"maxpool input {x.shape} too small")
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2x2_backward(dout, cache):
    x_shape, arg = cache
    n, c, h, w = x_shape
    h2, w2 = arg.shape[2:]
    onehot = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx


def dense_forward(x, w, b):
    """``x`` (N,F) -> (N,O) with ``w`` (O,F)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DataError(f"dense expects input length {w.shape[1]}, got {x.shape[1:]}")
    return x @ w.T + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def l2_normalize(v, eps=1e-12):
    """Row-wise ``v / ||v||``; returns ``(out, norms)``."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DataError("cannot normalize a (near) zero vector")
    return v / norms, norms


def l2_normalize_backward(dout, out, norms):
    return (dout - out * np.sum(out * dout, axis=-1, keepdims=True)) / norms


def euclidean_distance(a, b):
    """``||a - b||`` along the last axis."""
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)


def euclidean_distance_backward(dd, a, b, d):
    diff = a - b
    safe = np.where(d > 0, d, 1.0)
    ga = np.where((d > 0)[..., None], diff / safe[..., None], 0.0) * dd[..., None]
    return ga, -ga


def contrastive_loss(d, y, margin):
    """Mean over the batch of ``y*d^2 + (1-y)*max(margin-d, 0)^2``.

    Returns the loss and its gradient with respect to each distance.
    """
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if d.size == 0:
        raise DataError("empty batch")
    if margin <= 0:
        raise ValueError("margin must be positive")
    bsz = d.size
    hinge = np.maximum(margin - d, 0.0)
    loss = float(np.sum(y * d * d + (1.0 - y) * hinge * hinge) / bsz)
    grad = (2.0 * y * d - 2.0 * (1.0 - y) * hinge) / bsz
    return loss, grad


# -- model -------------------------------------------------------------------


@dataclass
class ModelParams:
    arch: dict  # {"input_shape": [H, W], "layers": [...]}
    tensors: dict[str, np.ndarray]

    @property
    def input_shape(self):
        return tuple(self.arch["input_shape"])

    def copy(self):
        return ModelParams(copy.deepcopy(self.arch), {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams(copy.deepcopy(self.arch), {k: v.astype(dtype) for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.tensors.keys() == other.tensors.keys()
            and all(
                self.tensors[k].dtype == other.tensors[k].dtype and np.array_equal(self.tensors[k], other.tensors[k])
                for k in self.tensors
            )
        )


def _layer_shapes(input_shape, layers):
    """Yield (layer index, layer, tensor name prefix, param shapes) while tracking geometry."""
    c, h, w = 1, *input_shape
    n_conv = 0
    for i, layer in enumerate(layers):
        kind = layer["type"]
        if kind == "conv":
            k, pad = layer["k"], layer.get("pad", 0)
            stride = layer.get("stride", 1)
            o = layer["out"]
            yield i, f"conv{n_conv}", {"w": (o, c, k, k), "b": (o,)}
            n_conv += 1
            c, h, w = o, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        elif kind == "maxpool":
            h, w = h // 2, w // 2
        elif kind == "dense":
            yield i, "dense", {"w": (layer["out"], c * h * w), "b": (layer["out"],)}
            c, h, w = layer["out"], 1, 1
        elif kind in ("relu", "l2norm"):
            pass
        else:
            raise DataError(f"unknown layer type {kind!r}")
        if h < 1 or w < 1:
            raise GeometryError(f"input {tuple(input_shape)} collapses to nothing at layer {i} ({kind})")


def init_params(input_shape, seed, layers=DEFAULT_LAYERS, dtype=np.float32) -> ModelParams:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for _, prefix, shapes in _layer_shapes(input_shape, layers):
        wshape = shapes["w"]
        fan_in = int(np.prod(wshape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        tensors[f"{prefix}.w"] = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        tensors[f"{prefix}.b"] = np.zeros(shapes["b"], dtype=dtype)
    arch = {"input_shape": [int(input_shape[0]), int(input_shape[1])], "layers": [dict(l) for l in layers]}
    if arch["layers"][-2:] != [{"type": "dense", "out": EMBED_DIM}, {"type": "l2norm"}]:
        raise DataError(f"architecture must end with dense({EMBED_DIM}) and l2norm")
    return ModelParams(arch, tensors)


def forward(params: ModelParams, x):
    """Run the embedder on a batch ``x`` of shape (N, 1, H, W)."""
    caches = []
    names = {i: prefix for i, prefix, _ in _layer_shapes(params.input_shape, params.arch["layers"])}
    t = params.tensors
    for i, layer in enumerate(params.arch["layers"]):
        kind = layer["type"]
        if kind == "conv":
            p = names[i]
            x, cache = conv2d_forward(x, t[p + ".w"], t[p + ".b"], layer.get("stride", 1), layer.get("pad", 0))
        elif kind == "relu":
            x, cache = relu_forward(x)
        elif kind == "maxpool":
            x, cache = maxpool2x2_forward(x)
        elif kind == "dense":
            shape = x.shape
            x, cache = dense_forward(x.reshape(shape[0], -1), t["dense.w"], t["dense.b"])
            cache = (cache, shape)
        elif kind == "l2norm":
            x, norms = l2_normalize(x)
            cache = (x, norms)
        caches.append(cache)
    return x, caches


def backward(params: ModelParams, caches, dout):
    grads = {}
    names = {i: prefix for i, prefix, _ in _layer_shapes(params.input_shape, params.arch["layers"])}
    layers = params.arch["layers"]
    for i in range(len(layers) - 1, -1, -1):
        kind = layers[i]["type"]
        cache = caches[i]
        if kind == "conv":
            p = names[i]
            dout, grads[p + ".w"], grads[p + ".b"] = conv2d_backward(dout, cache)
        elif kind == "relu":
            dout = relu_backward(dout, cache)
        elif kind == "maxpool":
            dout = maxpool2x2_backward(dout, cache)
        elif kind == "dense":
            inner, shape = cache
            dout, grads["dense.w"], grads["dense.b"] = dense_backward(dout, inner)
            dout = dout.reshape(shape)
        elif kind == "l2norm":
            dout = l2_normalize_backward(dout, *cache)
    return grads, dout


def images_to_batch(images, params: ModelParams):
    """Stack BandImages into an (N,1,H,W) batch scaled to [0, 1]."""
    dtype = next(iter(params.tensors.values())).dtype
    want = params.input_shape
    out = np.empty((len(images), 1, *want), dtype=dtype)
    for i, img in enumerate(images):
        px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
        if px.shape != want:
            raise GeometryError(
                f"band image is {px.shape[1]}x{px.shape[0]} (WxH) but the model was trained on "
                f"{want[1]}x{want[0]}; retrain for this window size / FTM count"
            )
        out[i, 0] = px
    out /= dtype.type(255.0)
    return out


def embed_batch(images, params: ModelParams, chunk=256) -> np.ndarray:
    parts = []
    for s in range(0, len(images), chunk):
        emb, _ = forward(params, images_to_batch(images[s : s + chunk], params))
        parts.append(emb)
    if not parts:
        return np.zeros((0, EMBED_DIM))
    return np.concatenate(parts)


def embed(img, params: ModelParams) -> np.ndarray:
    """Unit-norm 256-d embedding of one band image."""
    return embed_batch([img], params)[0]


def siamese_loss_and_grads(params: ModelParams, vision_batch, wireless_batch, labels, margin):
    """Both branches through the same params; returns (loss, grads, distances)."""
    b = len(labels)
    emb, caches = forward(params, np.concatenate([vision_batch, wireless_batch]))
    tv, tw = emb[:b], emb[b:]
    d = euclidean_distance(tv, tw)
    loss, dd = contrastive_loss(d, labels, margin)
    gv, gw = euclidean_distance_backward(dd.astype(emb.dtype), tv, tw, d)
    grads, _ = backward(params, caches, np.concatenate([gv, gw]).astype(emb.dtype))
    return loss, grads, d


def sgd_step(params: ModelParams, grads, lr) -> ModelParams:
    """Plain SGD: ``p - lr * g`` for every tensor."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    new = {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        new[name] = (p - p.dtype.type(lr) * g.astype(p.dtype)).astype(p.dtype)
    return ModelParams(params.arch, new)
