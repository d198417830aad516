"""Toy dataset and a small double-precision trainer.

Images are 8x8 greyscale bars: class 0 horizontal, class 1 vertical and
class 2 diagonal, drawn with random position, intensity and background
noise.  Training is plain minibatch SGD on softmax cross-entropy with an
optional PGD inner loop; weights are rounded to single precision at the
end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Conv2d, Dense, Flatten, Network, ReLU

log = logging.getLogger(__name__)

IMAGE_SIDE = 8
TRAIN_FRACTION = 0.8


class ArchError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ToyDataset:
    images: np.ndarray  # (N, m, n, c) float32
    labels: np.ndarray
    split: tuple  # "train" / "test" per image
    num_classes: int
    seed: int

    def subset(self, tag: str):
        idx = np.array([i for i, s in enumerate(self.split) if s == tag], dtype=np.int64)
        return self.images[idx], self.labels[idx]

    def indices(self, tag: str) -> list:
        return [i for i, s in enumerate(self.split) if s == tag]

    def __len__(self) -> int:
        return len(self.labels)


def _draw(rng: np.random.Generator, label: int, side: int) -> np.ndarray:
    img = rng.uniform(0.0, 0.15, size=(side, side))
    level = rng.uniform(0.6, 1.0)
    width = int(rng.integers(1, 3))
    if label == 0:
        r = int(rng.integers(1, side - width))
        img[r:r + width, :] = level
    elif label == 1:
        c = int(rng.integers(1, side - width))
        img[:, c:c + width] = level
    else:
        off = int(rng.integers(-2, 3))
        flip = bool(rng.integers(0, 2))
        ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        band = np.abs(ii - jj - off) < width if not flip else np.abs(ii + jj - (side - 1) - off) < width
        img[band] = level
    return np.clip(img, 0.0, 1.0)


def gen_dataset(seed: int, size: int, k: int = 3, side: int = IMAGE_SIDE) -> ToyDataset:
    """Deterministic class-structured images; each image uses its own derived seed."""
    if size < 1:
        raise ValueError("dataset size must be positive")
    if k not in (2, 3):
        raise ValueError("k must be 2 or 3")
    images = np.empty((size, side, side, 1), dtype=np.float32)
    labels = np.empty(size, dtype=np.int64)
    for i in range(size):
        rng = np.random.default_rng([seed, i])
        label = i % k
        labels[i] = label
        images[i, :, :, 0] = _draw(rng, label, side).astype(np.float32)
    n_train = int(round(TRAIN_FRACTION * size))
    split = tuple("train" if i < n_train else "test" for i in range(size))
    return ToyDataset(images, labels, split, k, seed)


# --------------------------------------------------------------------------
# architecture parsing

DEMO_ARCH = [
    {"type": "conv2d", "out_ch": 4, "kernel": 3, "padding": 0},
    {"type": "relu"},
    {"type": "conv2d", "out_ch": 4, "kernel": 3, "padding": 0},
    {"type": "relu"},
    {"type": "flatten"},
    {"type": "dense", "out": 3},
]


def _build_shapes(arch, input_shape):
    """Validate ``arch`` and return per-layer parameter shapes."""
    m, n, c = input_shape
    shape = (c, m, n)
    params = []
    if not arch:
        raise ArchError("empty architecture")
    for i, spec in enumerate(arch):
        kind = spec.get("type") if isinstance(spec, dict) else None
        if kind == "conv2d":
            if len(shape) != 3:
                raise ArchError(f"layer {i}: conv2d needs an image-shaped input")
            try:
                oc, kk, p = int(spec["out_ch"]), int(spec["kernel"]), int(spec.get("padding", 0))
            except (KeyError, TypeError, ValueError) as exc:
                raise ArchError(f"layer {i}: bad conv2d spec {spec}") from exc
            ho, wo = shape[1] + 2 * p - kk + 1, shape[2] + 2 * p - kk + 1
            if oc < 1 or kk < 1 or p < 0 or ho < 1 or wo < 1:
                raise ArchError(f"layer {i}: conv2d does not fit input {shape}")
            params.append(("conv2d", (oc, shape[0], kk, kk), p))
            shape = (oc, ho, wo)
        elif kind == "dense":
            if len(shape) != 1:
                raise ArchError(f"layer {i}: dense needs a flat input")
            try:
                out = int(spec["out"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ArchError(f"layer {i}: bad dense spec {spec}") from exc
            if out < 1:
                raise ArchError(f"layer {i}: dense width must be positive")
            params.append(("dense", (out, shape[0]), 0))
            shape = (out,)
        elif kind == "relu":
            params.append(("relu", None, 0))
        elif kind == "flatten":
            params.append(("flatten", None, 0))
            shape = (int(np.prod(shape)),)
        else:
            raise ArchError(f"layer {i}: unknown layer type {kind!r}")
    if len(shape) != 1 or shape[0] < 2:
        raise ArchError(f"architecture must end in a logits vector, got shape {shape}")
    return params


# --------------------------------------------------------------------------
# double-precision model with manual backprop


class _Model:
    def __init__(self, params, weights):
        self.params = params
        self.weights = weights  # list of (W, b) or None

    def forward(self, x):
        """``x`` is ``(B, c, h, w)``; returns logits and a cache for backprop."""
        cache = []
        a = x
        for (kind, _, p), wb in zip(self.params, self.weights):
            if kind == "conv2d":
                W, b = wb
                ap = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a
                kh = W.shape[2]
                patches = np.lib.stride_tricks.sliding_window_view(ap, (kh, kh), axis=(2, 3))
                out = np.einsum("bchwij,ocij->bohw", patches, W, optimize=True) + b[None, :, None, None]
                cache.append((ap.shape, patches))
                a = out
            elif kind == "dense":
                W, b = wb
                cache.append(a)
                a = a @ W.T + b
            elif kind == "relu":
                cache.append(a > 0)
                a = a * (a > 0)
            else:
                cache.append(a.shape)
                a = a.reshape(a.shape[0], -1)
        return a, cache

    def backward(self, grad, cache):
        grads = [None] * len(self.params)
        for i in range(len(self.params) - 1, -1, -1):
            kind, _, p = self.params[i]
            if kind == "conv2d":
                W, _ = self.weights[i]
                ap_shape, patches = cache[i]
                gW = np.einsum("bohw,bchwij->ocij", grad, patches, optimize=True)
                gb = grad.sum(axis=(0, 2, 3))
                grads[i] = (gW, gb)
                gx = np.zeros(ap_shape)
                kh = W.shape[2]
                ho, wo = grad.shape[2], grad.shape[3]
                for u in range(kh):
                    for v in range(kh):
                        gx[:, :, u:u + ho, v:v + wo] += np.einsum("bohw,oc->bchw", grad, W[:, :, u, v])
                grad = gx[:, :, p:ap_shape[2] - p, p:ap_shape[3] - p] if p else gx
            elif kind == "dense":
                W, _ = self.weights[i]
                a = cache[i]
                grads[i] = (grad.T @ a, grad.sum(axis=0))
                grad = grad @ W
            elif kind == "relu":
                grad = grad * cache[i]
            else:
                grad = grad.reshape(cache[i])
        return grads, grad


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(np.log(prob[np.arange(n), labels] + 1e-300))
    g = prob.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def loss_and_grads(model: _Model, x, labels):
    logits, cache = model.forward(x)
    loss, g = _softmax_xent(logits, labels)
    grads, gx = model.backward(g, cache)
    return loss, grads, gx


def _init(params, rng):
    weights = []
    for kind, shape, _ in params:
        if kind in ("conv2d", "dense"):
            fan_in = int(np.prod(shape[1:]))
            W = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            weights.append((W, np.zeros(shape[0])))
        else:
            weights.append(None)
    return weights


def _pgd(model, x, labels, eps, steps):
    alpha = 2.5 * eps / steps
    xa = x.copy()
    for _ in range(steps):
        _, _, gx = loss_and_grads(model, xa, labels)
        xa = xa + alpha * np.sign(gx)
        xa = np.clip(np.clip(xa, x - eps, x + eps), 0.0, 1.0)
    return xa


def _to_network(params, weights, input_shape) -> Network:
    layers = []
    for (kind, _, p), wb in zip(params, weights):
        if kind == "conv2d":
            layers.append(Conv2d(wb[0].astype(np.float32), wb[1].astype(np.float32), padding=p))
        elif kind == "dense":
            layers.append(Dense(wb[0].astype(np.float32), wb[1].astype(np.float32)))
        elif kind == "relu":
            layers.append(ReLU())
        else:
            layers.append(Flatten())
    return Network(input_shape, layers)


def train(arch, dataset: ToyDataset, epochs: int = 30, lr: float = 0.1, pgd: dict | None = None,
          seed: int = 0, batch_size: int = 32) -> Network:
    """Minibatch SGD in double precision; returns single-precision weights.

    ``pgd`` is ``{"enabled": bool, "eps": float, "steps": int}``; when
    enabled each batch is augmented with its PGD adversarial counterpart.
    """
    input_shape = tuple(dataset.images.shape[1:])
    params = _build_shapes(arch, input_shape)
    rng = np.random.default_rng(seed)
    model = _Model(params, _init(params, rng))
    x_train, y_train = dataset.subset("train")
    x_train = x_train.astype(np.float64).transpose(0, 3, 1, 2)
    pgd = pgd or {}
    for epoch in range(epochs):
        order = rng.permutation(len(y_train))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if pgd.get("enabled"):
                xa = _pgd(model, xb, yb, float(pgd["eps"]), int(pgd.get("steps", 5)))
                xb, yb = np.concatenate([xb, xa]), np.concatenate([yb, yb])
            loss, grads, _ = loss_and_grads(model, xb, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            for i, g in enumerate(grads):
                if g is not None:
                    W, b = model.weights[i]
                    model.weights[i] = (W - lr * g[0], b - lr * g[1])
            total += loss * len(idx)
        log.info("epoch %d loss %.5f", epoch, total / max(len(y_train), 1))
    return _to_network(params, model.weights, input_shape)


def accuracy(net: Network, images, labels, backend="REF_F64") -> float:
    from .backends import infer

    hits = sum(int(np.argmax(np.asarray(infer(backend, net, x), dtype=np.float64)) == y)
               for x, y in zip(images, labels))
    return hits / max(len(labels), 1)


def linear_probe_accuracy(dataset: ToyDataset, epochs: int = 200, lr: float = 0.5) -> float:
    """Test accuracy of a softmax-regression probe trained on raw pixels."""
    xtr, ytr = dataset.subset("train")
    xte, yte = dataset.subset("test")
    xtr = xtr.reshape(len(ytr), -1).astype(np.float64)
    xte = xte.reshape(len(yte), -1).astype(np.float64)
    W = np.zeros((dataset.num_classes, xtr.shape[1]))
    b = np.zeros(dataset.num_classes)
    for _ in range(epochs):
        _, g = _softmax_xent(xtr @ W.T + b, ytr)
        W -= lr * g.T @ xtr
        b -= lr * g.sum(axis=0)
    return float(np.mean(np.argmax(xte @ W.T + b, axis=1) == yte))
