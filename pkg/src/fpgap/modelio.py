"""FPGAP-MODEL-v1 container files.

A container is a text manifest whose first line is the magic string, followed
by a JSON document.  The manifest points (by relative path) to a binary blob
of little-endian IEEE-754 single-precision values.  For networks the blob
holds, in layer order, conv weights in ``(out_ch, in_ch, kh, kw)`` order then
the bias, and dense weights row-major then the bias.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .core import Conv2d, Dense, Flatten, Network, ReLU, ShapeError, PreconditionError

MAGIC = "FPGAP-MODEL-v1"
_LE32 = np.dtype("<f4")


class ModelFormatError(ValueError):
    pass


def _write_container(path, manifest: dict, blob: bytes) -> None:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest = dict(manifest)
    manifest["blob"] = blob_path.name
    manifest["blob_bytes"] = len(blob)
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    text = MAGIC + "\n" + json.dumps(manifest, indent=2, sort_keys=False) + "\n"
    path.write_text(text)


def _read_container(path, kind: str):
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"cannot read {path}: {exc}") from exc
    head, _, body = text.partition("\n")
    if head.strip() != MAGIC:
        raise ModelFormatError(f"{path}: missing {MAGIC} header")
    try:
        manifest = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("kind") != kind:
        raise ModelFormatError(f"{path}: expected kind {kind!r}, got {manifest.get('kind')!r}")
    blob_path = path.parent / manifest.get("blob", "")
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read blob {blob_path}: {exc}") from exc
    if len(blob) % 4:
        raise ModelFormatError(f"{blob_path}: length is not a multiple of 4")
    return manifest, np.frombuffer(blob, dtype=_LE32).astype(np.float32)


class _Reader:
    def __init__(self, values: np.ndarray):
        self.values = values
        self.pos = 0

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if self.pos + n > self.values.size:
            raise ModelFormatError("weight blob is truncated")
        out = self.values[self.pos:self.pos + n].reshape(shape).copy()
        self.pos += n
        return out


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            layers.append({
                "type": "conv2d", "out_ch": layer.out_ch, "in_ch": layer.in_ch,
                "kh": layer.kh, "kw": layer.kw, "padding": layer.padding, "stride": layer.stride,
            })
        elif isinstance(layer, Dense):
            layers.append({"type": "dense", "rows": layer.rows, "cols": layer.cols})
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu"})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
    return {"kind": "network", "input_shape": list(net.input_shape), "layers": layers}


def _network_blob(net: Network) -> bytes:
    parts = []
    for layer in net.layers:
        if isinstance(layer, (Conv2d, Dense)):
            parts.append(layer.weight.astype(_LE32).ravel())
            parts.append(layer.bias.astype(_LE32).ravel())
    if not parts:
        return b""
    return np.concatenate(parts).tobytes()


def save_model(net: Network, path, extra: dict | None = None) -> None:
    manifest = network_to_dict(net)
    if extra:
        manifest["meta"] = extra
    _write_container(path, manifest, _network_blob(net))


def load_model(path) -> Network:
    manifest, values = _read_container(path, "network")
    reader = _Reader(values)
    layers = []
    try:
        for spec in manifest["layers"]:
            kind = spec["type"]
            if kind == "conv2d":
                w = reader.take((spec["out_ch"], spec["in_ch"], spec["kh"], spec["kw"]))
                b = reader.take((spec["out_ch"],))
                layers.append(Conv2d(w, b, padding=int(spec.get("padding", 0)),
                                     stride=int(spec.get("stride", 1))))
            elif kind == "dense":
                w = reader.take((spec["rows"], spec["cols"]))
                b = reader.take((spec["rows"],))
                layers.append(Dense(w, b))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ModelFormatError(f"unknown layer type {kind!r}")
        if reader.pos != values.size:
            raise ModelFormatError("weight blob has trailing data")
        return Network(tuple(manifest["input_shape"]), layers)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc}") from exc
    except (ShapeError, PreconditionError) as exc:
        raise ModelFormatError(str(exc)) from exc


def save_dataset(dataset, path) -> None:
    manifest = {
        "kind": "dataset",
        "image_shape": list(dataset.images.shape[1:]),
        "count": int(dataset.images.shape[0]),
        "num_classes": int(dataset.num_classes),
        "seed": int(dataset.seed),
        "labels": [int(v) for v in dataset.labels],
        "split": list(dataset.split),
    }
    _write_container(path, manifest, dataset.images.astype(_LE32).tobytes())


def load_dataset(path):
    from .modelgen import ToyDataset

    manifest, values = _read_container(path, "dataset")
    try:
        shape = (manifest["count"], *manifest["image_shape"])
        if values.size != int(np.prod(shape)):
            raise ModelFormatError("dataset blob size does not match manifest")
        return ToyDataset(
            images=values.reshape(shape),
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            split=tuple(manifest["split"]),
            num_classes=int(manifest["num_classes"]),
            seed=int(manifest["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc}") from exc


def file_digest(path) -> str:
    """sha256 over a container manifest and its blob."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    blob = path.with_suffix(".bin")
    if blob.exists():
        h.update(blob.read_bytes())
    return h.hexdigest()


def package_data(name: str) -> str:
    return os.path.join(os.path.dirname(__file__), "data", name)
