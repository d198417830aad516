"""Interval bounds and the big-M MILP encoding of a ReLU network.

The network is first lowered to a chain of dense affine maps (convolutions
become Toeplitz matrices over the channel-first flattened activation).
Neuron pre-activations are kept as affine expressions over the MILP
variables instead of separate variables: stable-inactive neurons contribute
zero, stable-active neurons pass their expression through, and only
unstable neurons introduce a continuous output ``y`` and a binary phase
``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from ..backends import Backend, forward
from ..core import (
    Conv2d, Dense, Flatten, Network, PerturbationSet, PreconditionError, ReLU, cw_loss, to_rational,
)
from .lp import LinearProgram

_U = 2.0 ** -53


@dataclass
class AffineLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    relu: bool


def conv_matrix(layer: Conv2d, in_shape) -> np.ndarray:
    ic, h, w = in_shape
    oc, ho, wo = layer.output_shape(in_shape)
    p = layer.padding
    M = np.zeros((oc, ho, wo, ic, h, w))
    wt = layer.weight.astype(np.float64)
    oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    for c in range(ic):
        for i in range(layer.kh):
            for j in range(layer.kw):
                ih, iw = oh + i - p, ow + j - p
                ok = (ih >= 0) & (ih < h) & (iw >= 0) & (iw < w)
                for o in range(oc):
                    M[o, oh[ok], ow[ok], c, ih[ok], iw[ok]] = wt[o, c, i, j]
    return M.reshape(oc * ho * wo, ic * h * w)


_affine_cache: dict = {}


def affine_layers(net: Network, exact: bool = False) -> list:
    """Lower ``net`` to dense affine layers in double or exact rational arithmetic."""
    key = (id(net), exact)
    cached = _affine_cache.get(key)
    if cached is not None and cached[0] is net:
        return cached[1]
    shapes = net.shapes()
    out = []
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Conv2d):
            W = conv_matrix(layer, shapes[idx])
            b = np.repeat(layer.bias.astype(np.float64), W.shape[0] // layer.out_ch)
            out.append(AffineLayer(W, b, False))
        elif isinstance(layer, Dense):
            out.append(AffineLayer(layer.weight.astype(np.float64), layer.bias.astype(np.float64), False))
        elif isinstance(layer, ReLU):
            if not out or out[-1].relu:
                raise PreconditionError("ReLU must follow a linear layer")
            out[-1].relu = True
        elif isinstance(layer, Flatten):
            continue
    if out[-1].relu:
        raise PreconditionError("network must end with a linear layer")
    if exact:
        out = [AffineLayer(to_rational(a.W), to_rational(a.b), a.relu) for a in out]
    _affine_cache[key] = (net, out)
    return out


def input_box(region: PerturbationSet, exact: bool):
    lo, hi = region.box("rational" if exact else "double")
    # variables are ordered channel-first, like the network's activations
    return lo.transpose(2, 0, 1).reshape(-1), hi.transpose(2, 0, 1).reshape(-1)


@dataclass
class BoundsTable:
    """Pre-activation bounds per affine layer."""

    lower: list
    upper: list
    exact: bool

    def unstable(self, layer: int) -> np.ndarray:
        return np.flatnonzero((self.lower[layer] < 0) & (self.upper[layer] > 0))

    def num_unstable(self, affine: list) -> int:
        return sum(len(self.unstable(i)) for i, a in enumerate(affine) if a.relu)


def _interval_affine(W, b, lo, hi, exact):
    if exact:
        Wp = np.where(W > 0, W, Fraction(0))
        Wn = np.where(W < 0, W, Fraction(0))
        return Wp.dot(lo) + Wn.dot(hi) + b, Wp.dot(hi) + Wn.dot(lo) + b
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    l = Wp @ lo + Wn @ hi + b
    u = Wp @ hi + Wn @ lo + b
    # covers the rounding error of any summation order
    mag = np.abs(W) @ np.maximum(np.abs(lo), np.abs(hi)) + np.abs(b)
    pad = (W.shape[1] + 2) * 2 * _U * mag
    return l - pad, u + pad


def interval_bounds(net: Network, region: PerturbationSet, arithmetic: str = "double") -> BoundsTable:
    exact = arithmetic == "rational"
    lo, hi = input_box(region, exact)
    lowers, uppers = [], []
    for layer in affine_layers(net, exact):
        l, u = _interval_affine(layer.W, layer.b, lo, hi, exact)
        lowers.append(l)
        uppers.append(u)
        if layer.relu:
            zero = Fraction(0) if exact else 0.0
            lo = np.where(l > 0, l, zero)
            hi = np.where(u > 0, u, zero)
        else:
            lo, hi = l, u
    return BoundsTable(lowers, uppers, exact)


@dataclass
class MilpModel:
    """``min c.v + c0`` over mixed continuous/binary variables.

    ``threshold`` separates the verdicts: a global minimum strictly above it
    means robust.
    """

    names: list
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray
    A: np.ndarray
    senses: list
    rhs: np.ndarray
    row_tags: list
    c: np.ndarray
    c0: object
    threshold: object
    exact: bool
    objective: str
    input_vars: np.ndarray
    image_shape: tuple
    evaluate: Optional[Callable] = field(default=None, repr=False)

    @property
    def binaries(self) -> np.ndarray:
        return np.flatnonzero(self.binary)

    def relaxation(self, fixed: dict | None = None) -> LinearProgram:
        lb, ub = self.lb.copy(), self.ub.copy()
        for j, v in (fixed or {}).items():
            lb[j] = ub[j] = v
        return LinearProgram(self.c, self.A, self.senses, self.rhs, lb, ub, self.c0)

    def to_image(self, v: np.ndarray) -> np.ndarray:
        m, n, c = self.image_shape
        x = np.asarray(v)[self.input_vars]
        lo, hi = self.lb[self.input_vars], self.ub[self.input_vars]
        if not self.exact:
            x = np.clip(x.astype(np.float64), lo, hi)
        return x.reshape(c, m, n).transpose(1, 2, 0)

    def count_tag(self, tag: str) -> int:
        return sum(1 for t in self.row_tags if t == tag)


def dump_lp(model: MilpModel) -> str:
    """Plain-text dump in the spirit of the CPLEX LP format."""

    def term(coef, name):
        coef = float(coef)
        sign = "-" if coef < 0 else "+"
        return f"{sign} {abs(coef):.17g} {name}"

    def expr(row):
        nz = [j for j in range(len(row)) if row[j] != 0]
        return " ".join(term(row[j], model.names[j]) for j in nz) or "0"

    lines = [f"\\ objective={model.objective} threshold={float(model.threshold):.17g}", "Minimize",
             f" obj: {expr(model.c)} + {float(model.c0):.17g}", "Subject To"]
    for i in range(len(model.senses)):
        lines.append(f" {model.row_tags[i]}_{i}: {expr(model.A[i])} {model.senses[i]} {float(model.rhs[i]):.17g}")
    lines.append("Bounds")
    for j, name in enumerate(model.names):
        lines.append(f" {float(model.lb[j]):.17g} <= {name} <= {float(model.ub[j]):.17g}")
    bins = [model.names[j] for j in model.binaries]
    if bins:
        lines.append("Binaries")
        lines.append(" " + " ".join(bins))
    lines.append("End")
    return "\n".join(lines) + "\n"


class _Builder:
    def __init__(self, nvars: int, exact: bool):
        self.exact = exact
        self.nvars = nvars
        self.zero = Fraction(0) if exact else 0.0
        self.names, self.lb, self.ub, self.binary = [], [], [], []
        self.rows, self.senses, self.rhs, self.tags = [], [], [], []

    def var(self, name, lb, ub, binary=False) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.binary.append(binary)
        return len(self.names) - 1

    def unit(self, j) -> np.ndarray:
        r = self.vec()
        r[j] = Fraction(1) if self.exact else 1.0
        return r

    def vec(self) -> np.ndarray:
        if self.exact:
            v = np.empty(self.nvars, dtype=object)
            v.fill(Fraction(0))
            return v
        return np.zeros(self.nvars)

    def row(self, coeffs, sense, rhs, tag):
        self.rows.append(coeffs)
        self.senses.append(sense)
        self.rhs.append(rhs)
        self.tags.append(tag)

    def arr(self, values) -> np.ndarray:
        if self.exact:
            out = np.empty(len(values), dtype=object)
            for i, v in enumerate(values):
                out[i] = v
            return out
        return np.asarray(values, dtype=float)


def _network_exprs(b: _Builder, affine, bounds: BoundsTable, x_vars):
    """Affine expressions ``E v + k`` for the logits, adding ReLU rows as needed."""
    exact = b.exact
    E = np.stack([b.unit(j) for j in x_vars]) if len(x_vars) else None
    k = b.arr([b.zero] * len(x_vars))
    for li, layer in enumerate(affine):
        Ez = layer.W.dot(E) if exact else layer.W @ E
        kz = (layer.W.dot(k) if exact else layer.W @ k) + layer.b
        if not layer.relu:
            return Ez, kz
        lo, hi = bounds.lower[li], bounds.upper[li]
        Ea = np.empty_like(Ez)
        ka = np.empty_like(kz)
        for j in range(Ez.shape[0]):
            l, u = lo[j], hi[j]
            if u <= 0:
                Ea[j] = b.vec()
                ka[j] = b.zero
            elif l >= 0:
                Ea[j] = Ez[j]
                ka[j] = kz[j]
            else:
                y = b.var(f"y_{li}_{j}", b.zero, u)
                a = b.var(f"a_{li}_{j}", b.zero, Fraction(1) if exact else 1.0, binary=True)
                ey, ea = b.unit(y), b.unit(a)
                b.row(ey, ">=", b.zero, "relu")  # y >= 0
                b.row(ey - Ez[j], ">=", kz[j], "relu")  # y >= z
                b.row(ey - Ez[j] - l * ea, "<=", kz[j] - l, "relu")  # y <= z - l(1-a)
                b.row(ey - u * ea, "<=", b.zero, "relu")  # y <= u a
                Ea[j] = ey
                ka[j] = b.zero
        E, k = Ea, ka
    raise PreconditionError("network has no output layer")


def _count_vars(affine, bounds, n_in, k, objective) -> int:
    n = n_in + 2 * bounds.num_unstable(affine)
    if k > 2:
        n += 1 + (k - 1)
    if objective == "closest":
        n += 1
    return n


def encode_milp(net: Network, region: PerturbationSet, t0: int, objective: str = "worst",
                bounds: BoundsTable | None = None, threshold=0.0, exact: bool = False) -> MilpModel:
    """Big-M MILP for ``min CW`` (worst) or ``min ||x - x0||`` s.t. ``CW <= 0`` (closest).

    Both objectives range over the box of ``region``.
    """
    k = net.num_classes
    if not 0 <= t0 < k:
        raise PreconditionError(f"target class {t0} out of range for k={k}")
    if objective not in ("worst", "closest"):
        raise ValueError(f"unknown objective {objective!r}")
    affine = affine_layers(net, exact)
    if bounds is None:
        bounds = interval_bounds(net, region, "rational" if exact else "double")
    lo, hi = input_box(region, exact)
    n_in = lo.size
    b = _Builder(_count_vars(affine, bounds, n_in, k, objective), exact)
    x_vars = [b.var(f"x_{j}", lo[j], hi[j]) for j in range(n_in)]
    E, kv = _network_exprs(b, affine, bounds, x_vars)
    lo_out, hi_out = bounds.lower[-1], bounds.upper[-1]
    others = [i for i in range(k) if i != t0]
    one = Fraction(1) if exact else 1.0

    if k == 2:
        o = others[0]
        cw_expr, cw_const = E[t0] - E[o], kv[t0] - kv[o]
    else:
        m_lb = min(lo_out[i] for i in others) if objective == "closest" else max(lo_out[i] for i in others)
        m_ub = max(hi_out[i] for i in others)
        mvar = b.var("m", m_lb, m_ub)
        em = b.unit(mvar)
        sel = []
        for i in others:
            s = b.var(f"s_{i}", b.zero, one, binary=True)
            sel.append(s)
            big = m_ub - lo_out[i]
            if objective == "worst":
                b.row(em - E[i], ">=", kv[i], "max")  # m >= y_i
            b.row(em - E[i] + big * b.unit(s), "<=", kv[i] + big, "max")  # m <= y_i if selected
        b.row(sum((b.unit(s) for s in sel), b.vec()), "=", one, "max")
        cw_expr, cw_const = E[t0] - em, kv[t0]

    if objective == "worst":
        c, c0 = cw_expr, cw_const
    else:
        d = b.var("d", b.zero, region.eps_real if not exact else Fraction(region.eps_real))
        ed = b.unit(d)
        for j in x_vars:
            b.row(b.unit(j) - ed, "<=", region_x0(region, exact)[j], "norm")
            b.row(b.unit(j) + ed, ">=", region_x0(region, exact)[j], "norm")
        b.row(cw_expr, "<=", -cw_const, "cw")
        c, c0 = ed, b.zero

    A = np.stack(b.rows) if b.rows else np.zeros((0, b.nvars), dtype=object if exact else float)
    if objective == "closest":
        threshold = region.eps_real
    if exact and not isinstance(threshold, Fraction) and math.isfinite(threshold):
        tau = Fraction(threshold)
    else:
        tau = threshold if exact else float(threshold)
    model = MilpModel(
        names=b.names, lb=b.arr(b.lb), ub=b.arr(b.ub), binary=np.array(b.binary, dtype=bool),
        A=A, senses=b.senses, rhs=b.arr(b.rhs), row_tags=b.tags, c=c, c0=c0, threshold=tau,
        exact=exact, objective=objective, input_vars=np.array(x_vars, dtype=np.int64),
        image_shape=net.input_shape,
    )
    model.evaluate = _evaluator(net, region, t0, model)
    return model


_x0_cache: dict = {}


def region_x0(region: PerturbationSet, exact: bool):
    key = (id(region), exact)
    hit = _x0_cache.get(key)
    if hit is None or hit[0] is not region:
        x = region.x0.astype(np.float64).transpose(2, 0, 1).reshape(-1)
        hit = (region, to_rational(x) if exact else x)
        _x0_cache[key] = hit
    return hit[1]


def _evaluator(net, region, t0, model):
    backend = Backend.EXACT_RAT if model.exact else Backend.REF_F64
    x0 = to_rational(region.x0) if model.exact else region.x0.astype(np.float64)

    def evaluate(v):
        x = model.to_image(v)
        cw = cw_loss(forward(backend, net, x, check=False)[-1], t0)
        if model.objective == "worst":
            return cw
        if cw > 0:
            return None
        diff = x - x0
        return max(abs(d) for d in diff.flat) if model.exact else float(np.max(np.abs(diff)))

    return evaluate
