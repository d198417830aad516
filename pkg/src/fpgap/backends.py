"""Deterministic inference backends with distinct rounding behaviour.

Every reduction has a fixed evaluation order and every multiply and add is a
separate numpy ufunc call, so no fused multiply-add can occur.  Vectorisation
is only across independent output elements, never along a reduction.

* ``DIRECT_F32``: direct convolution, accumulating with ``in_ch`` innermost,
  then ``kh``, then ``kw`` outermost; bias added last.
* ``IM2COL_F32``: convolution lowered to a matrix product; the accumulator
  starts at the bias (folded in as an extra column) and runs sequentially
  over the lowered ``(in_ch, kh, kw)`` index.
* ``PAIRWISE_F32``: products in lowered order summed by a balanced binary
  tree; bias added last.
* ``WINOGRAD_F32``: F(4x4, 3x3) Winograd for 3x3 convolutions, direct
  convolution otherwise.
* ``REF_F64`` / ``EXACT_RAT``: the direct order in double and exact rational
  arithmetic.
"""

from __future__ import annotations

import enum
import weakref
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import (
    Conv2d, Dense, Flatten, Network, PreconditionError, QuantizationScheme, ReLU, ShapeError,
    as_precision, check_image, to_rational,
)


class Backend(str, enum.Enum):
    REF_F64 = "REF_F64"
    DIRECT_F32 = "DIRECT_F32"
    IM2COL_F32 = "IM2COL_F32"
    PAIRWISE_F32 = "PAIRWISE_F32"
    WINOGRAD_F32 = "WINOGRAD_F32"
    EXACT_RAT = "EXACT_RAT"

    @property
    def precision(self) -> str:
        if self is Backend.REF_F64:
            return "double"
        if self is Backend.EXACT_RAT:
            return "rational"
        return "single"


F32_BACKENDS = (Backend.DIRECT_F32, Backend.IM2COL_F32, Backend.PAIRWISE_F32, Backend.WINOGRAD_F32)

# Rows of G scaled by 24 so every transform entry is an integer; the 24*24
# factor is divided out once at the end of each output tile.
_BT = [[4, 0, -5, 0, 1, 0],
       [0, -4, -4, 1, 1, 0],
       [0, 4, -4, -1, 1, 0],
       [0, -2, -1, 2, 1, 0],
       [0, 2, -1, -2, 1, 0],
       [0, 4, 0, -5, 0, 1]]
_G24 = [[6, 0, 0],
        [-4, -4, -4],
        [-4, 4, -4],
        [1, 2, 4],
        [1, -2, 4],
        [0, 0, 24]]
_AT = [[1, 1, 1, 1, 1, 0],
       [0, 1, -1, 2, -2, 0],
       [0, 1, 1, 4, 4, 0],
       [0, 1, -1, 8, -8, 1]]
_WINO_SCALE = 576
WINO_IN, WINO_OUT, WINO_R = 6, 4, 3


@dataclass(frozen=True)
class TileGeometry:
    offset: int
    stride: int

    def __post_init__(self):
        if not 0 <= self.offset < self.stride:
            raise ValueError(f"invalid tile geometry offset={self.offset} stride={self.stride}")


def tile_geometry(backend, input_tile: int = WINO_IN, output_tile: int = WINO_OUT) -> TileGeometry:
    """Perturbation tiling for the random-perturbation attack.

    For Winograd, the window skips the ``input_tile - output_tile`` border so
    each perturbed window feeds a distinct output tile; a 13x13 -> 9x9
    tiling gives offset 4, stride 9.
    """
    if Backend(backend) is Backend.WINOGRAD_F32:
        return TileGeometry(input_tile - output_tile, output_tile)
    return TileGeometry(0, 4)


# --------------------------------------------------------------------------
# arithmetic helpers

def _kind(backend: Backend) -> str:
    return {"single": "f32", "double": "f64", "rational": "rat"}[backend.precision]


def _cast(arr, kind: str) -> np.ndarray:
    if kind == "f32":
        return np.asarray(arr, dtype=np.float32)
    if kind == "f64":
        return np.asarray(arr, dtype=np.float64) if np.asarray(arr).dtype != object \
            else as_precision(arr, "double")
    return to_rational(arr)


def _zeros(shape, kind: str) -> np.ndarray:
    if kind == "rat":
        out = np.empty(shape, dtype=object)
        out.fill(Fraction(0))
        return out
    return np.zeros(shape, dtype=np.float32 if kind == "f32" else np.float64)


_param_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _params(layer, kind: str):
    per_layer = _param_cache.setdefault(layer, {})
    if kind not in per_layer:
        per_layer[kind] = (_cast(layer.weight, kind), _cast(layer.bias, kind))
    return per_layer[kind]


def _const(matrix, kind: str) -> np.ndarray:
    return _cast(np.array(matrix, dtype=np.float64), kind)


def _pad(x: np.ndarray, p: int, kind: str) -> np.ndarray:
    if p == 0:
        return x
    c, h, w = x.shape
    out = _zeros((c, h + 2 * p, w + 2 * p), kind)
    out[:, p:p + h, p:p + w] = x
    return out


def tree_sum(terms: list):
    """Balanced binary-tree sum: ``sum(left half) + sum(right half)``."""
    n = len(terms)
    if n == 1:
        return terms[0]
    mid = (n + 1) // 2
    return tree_sum(terms[:mid]) + tree_sum(terms[mid:])


# --------------------------------------------------------------------------
# kernels

def _conv_products(x, w, padding, kind, order):
    oc, ic, kh, kw = w.shape
    xp = _pad(x, padding, kind)
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    for a, b, c in order(ic, kh, kw):
        yield w[:, a, b, c][:, None, None] * xp[a, b:b + ho, c:c + wo][None]


def _lowered(ic, kh, kw):
    return [(a, b, c) for a in range(ic) for b in range(kh) for c in range(kw)]


def _direct_order(ic, kh, kw):
    return [(a, b, c) for c in range(kw) for b in range(kh) for a in range(ic)]


def conv_direct(x, w, b, padding, kind):
    acc = None
    for term in _conv_products(x, w, padding, kind, _direct_order):
        acc = term if acc is None else acc + term
    return acc + b[:, None, None]


def conv_im2col(x, w, b, padding, kind):
    acc = None
    for term in _conv_products(x, w, padding, kind, _lowered):
        if acc is None:
            acc = np.broadcast_to(b[:, None, None], term.shape) + term
        else:
            acc = acc + term
    return acc


def conv_pairwise(x, w, b, padding, kind):
    terms = list(_conv_products(x, w, padding, kind, _lowered))
    return tree_sum(terms) + b[:, None, None]


def _left(L, X):
    """``L @ X`` over the last two axes of ``X``, summing sequentially."""
    rows = []
    for i in range(L.shape[0]):
        acc = L[i, 0] * X[..., 0, :]
        for k in range(1, L.shape[1]):
            acc = acc + L[i, k] * X[..., k, :]
        rows.append(acc)
    return np.stack(rows, axis=-2)


def _right(X, R):
    """``X @ R`` over the last two axes of ``X``, summing sequentially."""
    cols = []
    for j in range(R.shape[1]):
        acc = X[..., :, 0] * R[0, j]
        for k in range(1, R.shape[0]):
            acc = acc + X[..., :, k] * R[k, j]
        cols.append(acc)
    return np.stack(cols, axis=-1)


def _wino_consts(kind):
    return _const(_BT, kind), _const(_G24, kind), _const(_AT, kind), _cast([_WINO_SCALE], kind)[0]


def filter_transform(g: np.ndarray, kind: str) -> np.ndarray:
    """``G g G^T`` for filters of shape ``(..., 3, 3)`` (integer-scaled ``G``)."""
    _, G, _, _ = _wino_consts(kind)
    return _right(_left(G, g), G.T.copy())


def input_transform(d: np.ndarray, kind: str) -> np.ndarray:
    BT, _, _, _ = _wino_consts(kind)
    return _right(_left(BT, d), BT.T.copy())


def output_transform(m: np.ndarray, kind: str) -> np.ndarray:
    _, _, AT, scale = _wino_consts(kind)
    return _right(_left(AT, m), AT.T.copy()) / scale


def _kind_of(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    return "rat"


def winograd_conv(tile: np.ndarray, filt: np.ndarray, m: int = WINO_OUT, r: int = WINO_R) -> np.ndarray:
    """Single-tile F(4x4, 3x3): ``A^T [(G g G^T) * (B^T d B)] A``.

    ``tile`` is ``(6, 6)`` or ``(in_ch, 6, 6)`` and ``filt`` matches with
    ``(3, 3)`` trailing axes; channel products are summed in channel order.
    The arithmetic follows the dtype of ``tile`` (float32, float64 or
    Fraction objects).
    """
    if (m, r) != (WINO_OUT, WINO_R):
        raise ValueError(f"only F({WINO_OUT}x{WINO_OUT}, {WINO_R}x{WINO_R}) is implemented")
    tile = np.asarray(tile)
    kind = _kind_of(tile)
    filt = _cast(filt, kind)
    if filt.shape[-2:] != (WINO_R, WINO_R):
        raise ValueError(f"unsupported filter shape {filt.shape}")
    if tile.shape[-2:] != (WINO_IN, WINO_IN):
        raise ValueError(f"input tile must be {WINO_IN}x{WINO_IN}")
    if tile.ndim == 2:
        tile, filt = tile[None], filt[None]
    U = filter_transform(filt, kind)
    V = input_transform(tile, kind)
    acc = U[0] * V[0]
    for c in range(1, tile.shape[0]):
        acc = acc + U[c] * V[c]
    return output_transform(acc, kind)


_wino_filter_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def conv_winograd(x, w, b, padding, kind, layer=None):
    oc, ic, kh, kw = w.shape
    if (kh, kw) != (WINO_R, WINO_R):
        return conv_direct(x, w, b, padding, kind)
    xp = _pad(x, padding, kind)
    ho, wo = xp.shape[1] - 2, xp.shape[2] - 2
    th, tw = -(-ho // WINO_OUT), -(-wo // WINO_OUT)
    full = _zeros((ic, th * WINO_OUT + 2, tw * WINO_OUT + 2), kind)
    full[:, :xp.shape[1], :xp.shape[2]] = xp
    tiles = np.lib.stride_tricks.sliding_window_view(full, (WINO_IN, WINO_IN), axis=(1, 2))
    tiles = tiles[:, ::WINO_OUT, ::WINO_OUT]  # (ic, th, tw, 6, 6)
    if layer is not None:
        per_layer = _wino_filter_cache.setdefault(layer, {})
        if kind not in per_layer:
            per_layer[kind] = filter_transform(w, kind)
        U = per_layer[kind]
    else:
        U = filter_transform(w, kind)  # (oc, ic, 6, 6)
    V = input_transform(tiles, kind)  # (ic, th, tw, 6, 6)
    M = None
    for c in range(ic):
        term = U[:, c, None, None] * V[None, c]
        M = term if M is None else M + term
    Y = output_transform(M, kind)  # (oc, th, tw, 4, 4)
    Y = Y.transpose(0, 1, 3, 2, 4).reshape(oc, th * WINO_OUT, tw * WINO_OUT)
    return Y[:, :ho, :wo] + b[:, None, None]


def dense_direct(x, w, b, kind):
    acc = w[:, 0] * x[0]
    for j in range(1, w.shape[1]):
        acc = acc + w[:, j] * x[j]
    return acc + b


def dense_im2col(x, w, b, kind):
    acc = b
    for j in range(w.shape[1]):
        acc = acc + w[:, j] * x[j]
    return acc


def dense_pairwise(x, w, b, kind):
    return tree_sum([w[:, j] * x[j] for j in range(w.shape[1])]) + b


_CONV = {
    Backend.REF_F64: conv_direct,
    Backend.DIRECT_F32: conv_direct,
    Backend.EXACT_RAT: conv_direct,
    Backend.IM2COL_F32: conv_im2col,
    Backend.PAIRWISE_F32: conv_pairwise,
}
_DENSE = {
    Backend.IM2COL_F32: dense_im2col,
    Backend.PAIRWISE_F32: dense_pairwise,
}


def apply_linear(backend: Backend, layer, act: np.ndarray) -> np.ndarray:
    """One linear layer on an activation already in the backend's precision."""
    backend = Backend(backend)
    kind = _kind(backend)
    w, b = _params(layer, kind)
    if isinstance(layer, Conv2d):
        if backend is Backend.WINOGRAD_F32:
            return conv_winograd(act, w, b, layer.padding, kind, layer=layer)
        return _CONV[backend](act, w, b, layer.padding, kind)
    return _DENSE.get(backend, dense_direct)(act, w, b, kind)


def _relu(act: np.ndarray, kind: str) -> np.ndarray:
    if kind == "rat":
        out = act.copy()
        for idx, v in np.ndenumerate(act):
            if v < 0:
                out[idx] = Fraction(0)
        return out
    return np.maximum(act, act.dtype.type(0))


def forward(backend, net: Network, x: np.ndarray, *, check: bool = True, upto: int | None = None):
    """Run layers ``[0, upto)`` and return every intermediate activation.

    ``x`` is an ``(m, n, c)`` image; it is converted exactly to the backend's
    precision (double and rational inputs are accepted for the reference
    backends).
    """
    backend = Backend(backend)
    kind = _kind(backend)
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    if check:
        check_image(x)
    if kind == "f32" and x.dtype != np.float32:
        raise PreconditionError("single-precision backends take single-precision inputs")
    act = _cast(x, kind).transpose(2, 0, 1)
    acts = []
    layers = net.layers if upto is None else net.layers[:upto]
    for layer in layers:
        if isinstance(layer, (Conv2d, Dense)):
            act = apply_linear(backend, layer, act)
        elif isinstance(layer, ReLU):
            act = _relu(act, kind)
        elif isinstance(layer, Flatten):
            act = np.ascontiguousarray(act).reshape(-1)
        acts.append(act)
    return acts


def infer(backend, net: Network, x: np.ndarray, *, check: bool = True) -> np.ndarray:
    """Logits of ``net`` at ``x`` under ``backend``."""
    return forward(backend, net, x, check=check)[-1]


def first_layer_output(backend, net: Network, x: np.ndarray) -> np.ndarray:
    if not net.layers:
        raise ShapeError("empty network")
    if not isinstance(net.layers[0], (Conv2d, Dense)):
        raise PreconditionError("first layer must be linear")
    return forward(backend, net, x, upto=1)[0]


# --------------------------------------------------------------------------
# quantized mode

def _is_multiple(values: np.ndarray, step: float) -> bool:
    q = np.asarray(values, dtype=np.float64) / step
    return bool(np.all(q == np.round(q)))


def _round_to(act: np.ndarray, step: float, kind: str) -> np.ndarray:
    """Round to the nearest multiple of ``step``, ties to the even multiple."""
    if kind == "rat":
        fstep = Fraction(step)
        return np.asarray(np.frompyfunc(lambda v: round(v / fstep) * fstep, 1, 1)(act), dtype=object)
    q = np.round(np.asarray(act, dtype=np.float64) / step) * step
    return _cast(q, kind)


def quantize_network(net: Network, s0: float, s1: float) -> Network:
    """Round weights to multiples of ``s1`` and biases to multiples of ``s0*s1``."""
    layers = []
    for layer in net.layers:
        if isinstance(layer, (Conv2d, Dense)):
            w = (np.round(layer.weight.astype(np.float64) / s1) * s1).astype(np.float32)
            b = (np.round(layer.bias.astype(np.float64) / (s0 * s1)) * (s0 * s1)).astype(np.float32)
            if isinstance(layer, Conv2d):
                layer = Conv2d(w, b, padding=layer.padding, stride=layer.stride)
            else:
                layer = Dense(w, b)
        layers.append(layer)
    return Network(net.input_shape, layers)


def check_quantized(net: Network, q: QuantizationScheme) -> None:
    for layer in net.linear_layers():
        if not _is_multiple(layer.weight, q.s1):
            raise PreconditionError("weight is not a multiple of s1")
        if not _is_multiple(layer.bias, q.output_step):
            raise PreconditionError("bias is not a multiple of s0*s1")


def quantized_forward(net: Network, x: np.ndarray, q: QuantizationScheme, backend, *, check=True):
    """Per-layer activations of the quantized pipeline.

    Each linear output is rounded to a multiple of ``s0*s1``, which recovers
    the exact value when the implementation error is below ``s0*s1/2``.  The
    activation fed to the next linear layer is then re-quantized to a
    multiple of ``s0``; both roundings are ties-to-even.
    """
    backend = Backend(backend)
    kind = _kind(backend)
    if check:
        check_quantized(net, q)
        if not _is_multiple(x, q.s0):
            raise PreconditionError("input is not a multiple of s0")
    act = _cast(np.asarray(x), kind).transpose(2, 0, 1)
    acts = []
    linear_seen = 0
    n_linear = len(net.linear_layers())
    for layer in net.layers:
        if isinstance(layer, (Conv2d, Dense)):
            act = _round_to(apply_linear(backend, layer, act), q.output_step, kind)
            linear_seen += 1
            acts.append(act)
            if linear_seen < n_linear:
                act = _round_to(act, q.s0, kind)
            continue
        if isinstance(layer, ReLU):
            act = _relu(act, kind)
        elif isinstance(layer, Flatten):
            act = np.ascontiguousarray(act).reshape(-1)
        acts.append(act)
    return acts


def quantized_infer(net: Network, x: np.ndarray, q: QuantizationScheme, backend) -> np.ndarray:
    logits = quantized_forward(net, x, q, backend)[-1]
    return as_precision(logits, "single")


def measure_layer_error(net: Network, inputs, s0: float, s1: float, backends=F32_BACKENDS) -> float:
    """Largest per-layer deviation of any backend's linear output from the exact value.

    Every backend is fed the same exact (quantized) activation at each
    linear layer, so the result isolates the per-layer implementation error.
    """
    step = s0 * s1
    worst = 0.0
    n_linear = len(net.linear_layers())
    for x in inputs:
        act = to_rational(np.asarray(x)).transpose(2, 0, 1)
        seen = 0
        for layer in net.layers:
            if isinstance(layer, (Conv2d, Dense)):
                exact = apply_linear(Backend.EXACT_RAT, layer, act)
                exact_f = np.array([float(v) for v in exact.flat]).reshape(exact.shape)
                for backend in backends:
                    got = apply_linear(backend, layer, _cast(act, _kind(Backend(backend))))
                    diff = np.max(np.abs(np.asarray(got, dtype=np.float64) - exact_f))
                    worst = max(worst, float(diff))
                act = _round_to(exact, step, "rat")
                seen += 1
                if seen < n_linear:
                    act = _round_to(act, s0, "rat")
            elif isinstance(layer, ReLU):
                act = _relu(act, "rat")
            elif isinstance(layer, Flatten):
                act = np.ascontiguousarray(act).reshape(-1)
    return worst
