"""Shared types and precision utilities.

Images are plain numpy arrays of shape ``(m, n, c)``.  Their precision is
carried by the dtype: ``float32`` is single, ``float64`` is double and an
``object`` array of :class:`fractions.Fraction` is exact rational.  Inside the
network, activations are laid out channel-first as ``(c, h, w)`` and flattened
in C order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np


class Precision(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"
    RATIONAL = "rational"


class PreconditionError(ValueError):
    """Raised when an operation is called outside its documented domain."""


class ShapeError(ValueError):
    pass


_DTYPES = {Precision.SINGLE: np.float32, Precision.DOUBLE: np.float64}


def precision_of(x: np.ndarray) -> Precision:
    if x.dtype == np.float32:
        return Precision.SINGLE
    if x.dtype == np.float64:
        return Precision.DOUBLE
    if x.dtype == object:
        return Precision.RATIONAL
    raise TypeError(f"unsupported dtype {x.dtype}")


_to_fraction = np.frompyfunc(lambda v: v if isinstance(v, Fraction) else Fraction(float(v)), 1, 1)


def to_rational(x) -> np.ndarray:
    """Exact conversion of a float array (or scalar) to Fractions."""
    arr = np.asarray(x)
    if arr.dtype == object and arr.size and all(isinstance(v, Fraction) for v in arr.flat):
        return arr
    out = _to_fraction(arr)
    return np.asarray(out, dtype=object)


def as_precision(x, precision: Precision) -> np.ndarray:
    precision = Precision(precision)
    if precision is Precision.RATIONAL:
        return to_rational(x)
    arr = np.asarray(x)
    if arr.dtype == object:
        arr = np.array([float(v) for v in arr.flat], dtype=np.float64).reshape(arr.shape)
    return arr.astype(_DTYPES[precision])


def check_image(x: np.ndarray, *, unit_range: bool = True) -> None:
    if x.ndim != 3:
        raise ShapeError(f"image must have shape (m, n, c), got {x.shape}")
    vals = x.astype(np.float64) if x.dtype != object else np.array([float(v) for v in x.flat])
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("image contains non-finite values")
    if unit_range and (np.min(vals) < 0 or np.max(vals) > 1):
        raise PreconditionError("image values must lie in [0, 1]")


# --------------------------------------------------------------------------
# precision primitives


def cw_loss(y: Sequence, t: int):
    """Carlini-Wagner margin ``y[t] - max_{i != t} y[i]`` in the precision of ``y``.

    Ties in the inner max only depend on the value, so an exact tie with the
    target yields exactly zero.
    """
    y = np.asarray(y)
    k = y.shape[0]
    if y.ndim != 1 or k < 2:
        raise PreconditionError(f"logits must be a vector with k >= 2, got shape {y.shape}")
    if not 0 <= t < k:
        raise PreconditionError(f"class index {t} out of range for k={k}")
    others = [y[i] for i in range(k) if i != t]
    return y[t] - max(others)


def linf_distance(a: np.ndarray, b: np.ndarray):
    """``max |a_i - b_i|`` with the subtraction rounded in the operands' precision."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise PreconditionError(f"precision mismatch {a.dtype} vs {b.dtype}")
    if a.size == 0:
        return a.dtype.type(0) if a.dtype != object else Fraction(0)
    if a.dtype == object:
        return max(abs(p - q) for p, q in zip(a.flat, b.flat))
    return np.max(np.abs(a - b))


def widen_to_double(x: np.ndarray) -> np.ndarray:
    if x.dtype != np.float32:
        raise PreconditionError(f"expected single precision input, got {x.dtype}")
    return x.astype(np.float64)


def next_after(v, toward, precision=Precision.SINGLE):
    """IEEE-754 ``nextafter`` in the given binary precision."""
    precision = Precision(precision)
    if precision is Precision.SINGLE:
        return np.nextafter(np.float32(v), np.float32(toward))
    if precision is Precision.DOUBLE:
        return math.nextafter(float(v), float(toward))
    raise PreconditionError("next_after is undefined for rational precision")


# --------------------------------------------------------------------------
# network model


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    padding: int = 0
    stride: int = 1

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def kh(self) -> int:
        return self.weight.shape[2]

    @property
    def kw(self) -> int:
        return self.weight.shape[3]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ShapeError(f"conv expects ({self.in_ch}, h, w) input, got {shape}")
        _, h, w = shape
        ho = h + 2 * self.padding - self.kh + 1
        wo = w + 2 * self.padding - self.kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output would be empty for input {shape}")
        return (self.out_ch, ho, wo)


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (rows=out, cols=in)
    bias: np.ndarray

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    @property
    def cols(self) -> int:
        return self.weight.shape[1]

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.cols:
            raise ShapeError(f"dense expects ({self.cols},) input, got {shape}")
        return (self.rows,)


@dataclass(frozen=True, eq=False)
class ReLU:
    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True, eq=False)
class Flatten:
    def output_shape(self, shape):
        return (int(np.prod(shape)),)


Layer = Union[Conv2d, Dense, ReLU, Flatten]
LINEAR = (Conv2d, Dense)


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered layer list with single-precision canonical weights.

    ``input_shape`` is the image shape ``(m, n, c)``.
    """

    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("network has no layers")
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                if layer.weight.ndim != 4 or layer.bias.shape != (layer.out_ch,):
                    raise ShapeError("malformed conv layer")
                if layer.stride != 1:
                    raise ShapeError("only stride 1 is supported")
            elif isinstance(layer, Dense):
                if layer.weight.ndim != 2 or layer.bias.shape != (layer.rows,):
                    raise ShapeError("malformed dense layer")
            if isinstance(layer, LINEAR):
                if layer.weight.dtype != np.float32 or layer.bias.dtype != np.float32:
                    raise PreconditionError("canonical weights must be single precision")
                if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                    raise PreconditionError("non-finite weight")
        shapes = self.shapes()
        if len(shapes[-1]) != 1 or shapes[-1][0] < 2:
            raise ShapeError(f"final output must be a logits vector with k >= 2, got {shapes[-1]}")

    @property
    def chw_input_shape(self):
        m, n, c = self.input_shape
        return (c, m, n)

    def shapes(self) -> list:
        """Activation shape before the first layer and after each layer."""
        shape = self.chw_input_shape
        out = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def linear_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, LINEAR)]

    def replace_layer(self, index: int, layer: Layer) -> "Network":
        layers = list(self.layers)
        layers[index] = layer
        return Network(self.input_shape, layers)


# --------------------------------------------------------------------------
# regions and quantization


def _inward(a: np.ndarray, b: float, *, up: bool) -> np.ndarray:
    """``a + b`` rounded toward +inf (``up``) or -inf, via the TwoSum error term."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    if up:
        return np.where(err > 0, np.nextafter(s, np.inf), s)
    return np.where(err < 0, np.nextafter(s, -np.inf), s)


@dataclass(frozen=True, eq=False)
class PerturbationSet:
    """The l-inf ball of radius ``eps`` around a single-precision ``x0``, cut to [0, 1].

    ``eps`` is a double.  Both norm checks use the single-precision rounding
    of ``eps`` so that they refer to one real number.
    """

    x0: np.ndarray
    eps: float

    def __post_init__(self):
        if self.x0.dtype != np.float32:
            raise PreconditionError("perturbation centre must be single precision")
        if not self.eps >= 0:
            raise PreconditionError("eps must be nonnegative")
        check_image(self.x0)

    @property
    def eps32(self) -> np.float32:
        return np.float32(self.eps)

    @property
    def eps_real(self) -> float:
        return float(self.eps32)

    def box(self, precision=Precision.DOUBLE):
        """Real box ``[max(x0-eps, 0), min(x0+eps, 1)]`` with double endpoints.

        ``x0 +- eps`` is exact in double unless ``x0`` is tiny next to
        ``eps``; a rounded endpoint is moved one ulp inward so the box never
        exceeds the true ball.
        """
        x = self.x0.astype(np.float64)
        e = self.eps_real
        lo = _inward(x, -e, up=True)
        hi = _inward(x, e, up=False)
        lo = np.maximum(lo, 0.0)
        hi = np.minimum(hi, 1.0)
        if Precision(precision) is Precision.RATIONAL:
            return to_rational(lo), to_rational(hi)
        return lo, hi

    def contains(self, x: np.ndarray) -> bool:
        """Membership of a single-precision image in both precisions."""
        if x.dtype != np.float32 or x.shape != self.x0.shape:
            return False
        if np.any(x < 0) or np.any(x > 1):
            return False
        if linf_distance(x, self.x0) > self.eps32:
            return False
        return bool(linf_distance(widen_to_double(x), widen_to_double(self.x0)) <= self.eps_real)


@dataclass(frozen=True)
class QuantizationScheme:
    s0: float  # activation step
    s1: float  # weight step
    E: float  # loose bound on implementation error

    def __post_init__(self):
        if not (self.s0 > 0 and self.s1 > 0 and self.E > 0):
            raise PreconditionError("quantization steps and error bound must be positive")
        if not self.s0 * self.s1 > 2 * self.E:
            raise PreconditionError(
                f"s0*s1 = {self.s0 * self.s1:g} must exceed 2E = {2 * self.E:g}"
            )

    @property
    def output_step(self) -> float:
        return self.s0 * self.s1
