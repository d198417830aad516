"""Robustness queries on top of the MILP machinery."""

from __future__ import annotations

import itertools
import math
import time
from fractions import Fraction

import numpy as np

from ..core import Network, PerturbationSet, PreconditionError
from .bnb import DEFAULT_TIME_LIMIT, Stats, Verdict, VerifyResult, branch_and_bound
from .encoding import _Builder, affine_layers, encode_milp, input_box, interval_bounds
from .lp import LinearProgram, LPNumericalError, solve_lp

MAX_BRUTE_FORCE_UNSTABLE = 20


def _arith(mode: str) -> str:
    if mode not in ("double", "rational"):
        raise ValueError(f"unknown verifier mode {mode!r}")
    return mode


def verify_worst(net: Network, region: PerturbationSet, t0: int, tau=0.0, mode: str = "double",
                 time_limit: float = DEFAULT_TIME_LIMIT, *, optimize: bool = False) -> VerifyResult:
    """Decide ``min_{x in region} CW(NN(x), t0) > tau``.

    ``NotRobust`` carries the minimising point found and its CW value as the
    margin; ``Robust`` carries a proven lower bound on the minimum.
    """
    arith = _arith(mode)
    bounds = interval_bounds(net, region, arith)
    model = encode_milp(net, region, t0, "worst", bounds, threshold=tau, exact=arith == "rational")
    return branch_and_bound(model, time_limit, optimize=optimize)


def verify_closest(net: Network, x0: np.ndarray, eps: float, t0: int,
                   time_limit: float = DEFAULT_TIME_LIMIT, mode: str = "double") -> VerifyResult:
    """Minimise ``||x - x0||`` subject to ``CW(NN(x), t0) <= 0`` over the eps-box.

    Robust iff the minimum exceeds ``eps`` or no misclassified point exists
    (reported with an infinite margin).
    """
    arith = _arith(mode)
    region = PerturbationSet(np.asarray(x0, dtype=np.float32), eps)
    bounds = interval_bounds(net, region, arith)
    model = encode_milp(net, region, t0, "closest", bounds, exact=arith == "rational")
    return branch_and_bound(model, time_limit)


def _phase_lp(b: _Builder, affine, bounds, lo, hi, pattern, t0, other):
    exact = b.exact
    n = lo.size
    E = np.stack([b.unit(j) for j in range(n)])
    k = b.arr([b.zero] * n)
    rows, senses, rhs = [], [], []
    pos = 0
    for li, layer in enumerate(affine):
        Ez = layer.W.dot(E) if exact else layer.W @ E
        kz = (layer.W.dot(k) if exact else layer.W @ k) + layer.b
        if not layer.relu:
            c = Ez[t0] - Ez[other]
            c0 = kz[t0] - kz[other]
            A = np.stack(rows) if rows else np.zeros((0, n), dtype=object if exact else float)
            return LinearProgram(c, A, senses, b.arr(rhs), lo, hi, c0)
        Ea, ka = Ez.copy(), kz.copy()
        for j in range(Ez.shape[0]):
            if bounds.upper[li][j] <= 0:
                Ea[j], ka[j] = b.vec(), b.zero
            elif bounds.lower[li][j] >= 0:
                continue
            else:
                active = pattern[pos]
                pos += 1
                rows.append(Ez[j])
                senses.append(">=" if active else "<=")
                rhs.append(-kz[j])
                if not active:
                    Ea[j], ka[j] = b.vec(), b.zero
        E, k = Ea, ka
    raise PreconditionError("network has no output layer")


def brute_force_verify(net: Network, region: PerturbationSet, t0: int, tau=0.0,
                       mode: str = "double") -> VerifyResult:
    """Enumerate all ReLU phase patterns and solve one LP per pattern and rival class.

    Independent of the big-M encoding: each phase-fixed LP constrains the
    sign of every unstable pre-activation directly.
    """
    arith = _arith(mode)
    exact = arith == "rational"
    start = time.monotonic()
    affine = affine_layers(net, exact)
    bounds = interval_bounds(net, region, arith)
    n_unstable = bounds.num_unstable(affine)
    if n_unstable > MAX_BRUTE_FORCE_UNSTABLE:
        raise PreconditionError(f"{n_unstable} unstable ReLUs exceed the brute-force limit")
    k = net.num_classes
    if not 0 <= t0 < k:
        raise PreconditionError(f"target class {t0} out of range")
    lo, hi = input_box(region, exact)
    b = _Builder(lo.size, exact)
    stats = Stats()
    best, best_x = math.inf, None
    for pattern in itertools.product((False, True), repeat=n_unstable):
        for other in range(k):
            if other == t0:
                continue
            lp = _phase_lp(b, affine, bounds, lo, hi, pattern, t0, other)
            stats.lp_solves += 1
            try:
                res = solve_lp(lp, exact=exact)
            except LPNumericalError:
                stats.exact_fallbacks += 1
                res = solve_lp(lp, exact=True)
                if res.status == "optimal":
                    res.value = float(res.value)
                    res.x = np.array([float(v) for v in res.x])
            stats.lp_iterations += res.iterations
            if res.status == "optimal" and res.value < best:
                best, best_x = res.value, res.x
    stats.nodes = stats.lp_solves
    stats.wall_time = time.monotonic() - start
    if exact and not isinstance(tau, Fraction) and math.isfinite(tau):
        tau = Fraction(tau)
    m, n, c = net.input_shape
    cex = None
    if best_x is not None:
        cex = np.asarray(best_x).reshape(c, m, n).transpose(1, 2, 0)
    if best <= tau:
        return VerifyResult(Verdict.NOT_ROBUST, best, cex, best, best, stats)
    return VerifyResult(Verdict.ROBUST, best, None, best, best, stats)
