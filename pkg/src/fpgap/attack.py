"""Adversarial examples for inputs that an exact verifier proves robust.

The pipeline has three stages.  ``alpha_search`` darkens a seed image
until it sits just inside the robust region, ``quasi_adv_search`` brackets
the worst-case CW margin of that image between a robust tolerance ``tau0``
and an adversarial tolerance ``tau1``, and ``random_perturb_attack`` nudges
the solver's witness by a few ulps at a time until a float32 backend
misclassifies it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .backends import Backend, forward, infer, tile_geometry
from .core import (
    Dense, Network, PerturbationSet, PreconditionError, check_image, cw_loss, linf_distance,
    to_rational, widen_to_double,
)
from .verifier import DEFAULT_TIME_LIMIT, Verdict, VerifyResult, affine_layers, verify_worst

log = logging.getLogger(__name__)

DELTA_TARGET = 1e-7
GRID_INTERVALS = 16
TAU_GAP = 1e-7
DEFAULT_U = 2e-7
DEFAULT_ITERS = 1000


class UnbracketableSeed(PreconditionError):
    """No coefficient in [0, 1] makes the scaled seed non-robust."""


class SeedDiscarded(RuntimeError):
    """The solver timed out on the first tolerance query."""


# --------------------------------------------------------------------------
# helpers


def real_cw(net: Network, x: np.ndarray, t0: int, mode: str = "double"):
    """CW margin of a single-precision image under real arithmetic."""
    if mode == "rational":
        return cw_loss(forward(Backend.EXACT_RAT, net, to_rational(x), check=False)[-1], t0)
    return float(cw_loss(infer(Backend.REF_F64, net, widen_to_double(x), check=False), t0))


def cw_gradient(net: Network, x: np.ndarray, t0: int) -> np.ndarray:
    """Gradient of the CW margin at ``x`` for the local ReLU phase pattern."""
    v = np.asarray(x, dtype=np.float64).transpose(2, 0, 1).ravel()
    layers = affine_layers(net, exact=False)
    masks = []
    for layer in layers:
        v = layer.W @ v + layer.b
        if layer.relu:
            masks.append(v > 0)
            v = np.where(v > 0, v, 0.0)
    rival = max((i for i in range(v.size) if i != t0), key=lambda i: (v[i], -i))
    g = np.zeros(v.size)
    g[t0], g[rival] = 1.0, -1.0
    for layer in reversed(layers):
        if layer.relu:
            g = g * masks.pop()
        g = g @ layer.W
    m, n, c = net.input_shape
    return g.reshape(c, m, n).transpose(1, 2, 0)


def _round_witness(net, w, x_l, x_u, t0, mode):
    """Round a double witness to single precision inside ``[x_l, x_u]``.

    Tries round-to-nearest and rounding against the CW gradient and keeps
    whichever has the smaller real CW margin.
    """
    w = np.asarray(w, dtype=np.float64)
    near = np.clip(w.astype(np.float32), x_l, x_u)
    f = w.astype(np.float32)
    down = np.where(f.astype(np.float64) > w, np.nextafter(f, np.float32(-np.inf)), f)
    up = np.where(f.astype(np.float64) < w, np.nextafter(f, np.float32(np.inf)), f)
    g = cw_gradient(net, w, t0)
    directed = np.clip(np.where(g > 0, down, np.where(g < 0, up, f)), x_l, x_u)
    best = min(((real_cw(net, c, t0, mode), i, c) for i, c in enumerate((near, directed))),
               key=lambda item: (item[0], item[1]))
    return best[2], best[0]


def _above(v):
    """Smallest double strictly greater than ``v`` (exact for rationals)."""
    f = float(v)
    if Fraction(f) <= Fraction(v):
        f = math.nextafter(f, math.inf)
    return f


def clamp_bounds(x0: np.ndarray, eps: float):
    """Single-precision clamp images ``x_l``, ``x_u`` for ``Adv(x0)``.

    Start from ``max(x0 - eps, 0)`` and ``min(x0 + eps, 1)`` in single
    precision and step each element that violates either norm check one
    ulp inward.  Returns ``(x_l, x_u, steps_l, steps_u)`` where the step
    counts are the largest per-element loop counts.
    """
    x0 = np.asarray(x0)
    if x0.dtype != np.float32:
        raise PreconditionError("clamp bounds need a single-precision centre")
    e32 = np.float32(eps)
    e64 = float(e32)
    x0d = x0.astype(np.float64)
    one, zero = np.float32(1), np.float32(0)

    x_l = np.maximum(x0 - e32, zero)
    steps_l = 0
    while True:
        bad = ((x0 - x_l) > e32) | ((x0d - x_l.astype(np.float64)) > e64)
        if not bad.any():
            break
        x_l = np.where(bad, np.nextafter(x_l, one), x_l)
        steps_l += 1

    x_u = np.minimum(x0 + e32, one)
    steps_u = 0
    while True:
        bad = ((x_u - x0) > e32) | ((x_u.astype(np.float64) - x0d) > e64)
        if not bad.any():
            break
        x_u = np.where(bad, np.nextafter(x_u, zero), x_u)
        steps_u += 1
    return x_l, x_u, steps_l, steps_u


# --------------------------------------------------------------------------
# step 1: alpha search


@dataclass
class AlphaSearchResult:
    alpha: float
    delta: float
    x0: np.ndarray
    trail: list = field(default_factory=list)  # (alpha, verdict)
    grid: bool = False

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "delta": self.delta, "grid_search": self.grid,
                "trail": [[a, v] for a, v in self.trail]}


def scale_seed(x_seed: np.ndarray, alpha: float) -> np.ndarray:
    return (alpha * widen_to_double(x_seed)).astype(np.float32)


def alpha_search(net: Network, x_seed: np.ndarray, eps: float, t0: int, delta_target: float = DELTA_TARGET,
                 time_limit: float = DEFAULT_TIME_LIMIT, mode: str = "double") -> AlphaSearchResult:
    """Smallest ``alpha`` found with ``alpha * x_seed`` robust and ``(alpha - delta) * x_seed`` not.

    Bisects while the solver answers in time and falls back to a grid of
    16 intervals over the current bracket after a timeout.
    """
    check_image(x_seed)
    trail = []

    def verdict(alpha):
        res = verify_worst(net, PerturbationSet(scale_seed(x_seed, alpha), eps), t0, 0.0, mode, time_limit)
        trail.append((alpha, res.verdict.value))
        log.info("alpha %.12g: %s", alpha, res.verdict.value)
        return res.verdict

    if verdict(1.0) is not Verdict.ROBUST:
        raise PreconditionError("seed is not verified robust at alpha = 1")
    if verdict(0.0) is not Verdict.NOT_ROBUST:
        raise UnbracketableSeed("unbracketable seed: alpha = 0 is not shown non-robust")
    lo, hi = 0.0, 1.0
    grid = False
    while hi - lo > delta_target:
        if not grid:
            mid = 0.5 * (lo + hi)
            if np.array_equal(scale_seed(x_seed, mid), scale_seed(x_seed, hi)) or mid in (lo, hi):
                break
            v = verdict(mid)
            if v is Verdict.ROBUST:
                hi = mid
            elif v is Verdict.NOT_ROBUST:
                lo = mid
            else:
                grid = True
            continue
        step = (hi - lo) / GRID_INTERVALS
        points = [lo + i * step for i in range(1, GRID_INTERVALS)]
        results = [(a, verdict(a)) for a in points]
        robust = [a for a, v in results if v is Verdict.ROBUST]
        new_hi = min(robust) if robust else hi
        below = [a for a, v in results if v is Verdict.NOT_ROBUST and a < new_hi]
        new_lo = max(below) if below else lo
        if (new_lo, new_hi) == (lo, hi):
            break
        lo, hi = new_lo, new_hi
    return AlphaSearchResult(hi, hi - lo, scale_seed(x_seed, hi), trail, grid)


# --------------------------------------------------------------------------
# step 2: quasi-adversarial search


@dataclass
class QuasiAdvTuple:
    """``x0`` is robust with tolerance ``tau0``; ``x1`` in ``Adv(x0)`` has real CW below ``tau1``."""

    tau0: float
    tau1: float
    x1: np.ndarray
    partial: bool = False
    queries: list = field(default_factory=list)  # (tau, verdict)

    @property
    def gap(self) -> float:
        return self.tau1 - self.tau0

    def as_dict(self) -> dict:
        return {"tau0": float(self.tau0), "tau1": float(self.tau1), "gap": float(self.gap),
                "partial": self.partial, "queries": [[float(t), v] for t, v in self.queries]}


def quasi_adv_search(net: Network, x0: np.ndarray, eps: float, t0: int, time_limit: float = DEFAULT_TIME_LIMIT,
                     gap: float = TAU_GAP, mode: str = "double") -> QuasiAdvTuple:
    """Bisect the tolerance until a robust ``tau0`` and adversarial ``tau1`` are closer than ``gap``.

    Every solver answer tightens the bracket: robust answers raise ``tau0``
    to the queried tolerance, and each answer's incumbent point is rounded
    to single precision and, if it lowers ``tau1``, becomes ``x1`` with
    ``tau1`` the next double above its real CW margin.
    """
    region = PerturbationSet(np.asarray(x0, dtype=np.float32), eps)
    x_l, x_u, _, _ = clamp_bounds(region.x0, eps)
    queries = []
    state = {"lo": 0.0, "hi": math.inf, "x1": None}

    def absorb(res: VerifyResult):
        if res.witness is None:
            return
        cand, v = _round_witness(net, res.witness, x_l, x_u, t0, mode)
        t1 = _above(v)
        if t1 < state["hi"]:
            state["hi"], state["x1"] = t1, cand

    def query(tau):
        res = verify_worst(net, region, t0, tau, mode, time_limit)
        queries.append((tau, res.verdict.value))
        log.info("tau %.17g: %s", tau, res.verdict.value)
        absorb(res)
        return res

    first = query(0.0)
    if first.verdict is Verdict.TIMEOUT:
        raise SeedDiscarded("solver timed out on the initial robustness check")
    if first.verdict is not Verdict.ROBUST:
        raise PreconditionError("x0 is not verified robust at tau = 0")
    partial = False
    while state["hi"] - state["lo"] >= gap:
        lo, hi = state["lo"], state["hi"]
        tau = 0.5 * (lo + hi) if math.isfinite(hi) else max(2.0 * lo, 1.0)
        if tau in (lo, hi):
            break
        res = query(tau)
        if res.verdict is Verdict.ROBUST:
            state["lo"] = tau
        elif res.verdict is Verdict.TIMEOUT:
            partial = True
            break
    if state["x1"] is None:
        raise SeedDiscarded("no adversarial tolerance found before the search stopped")
    return QuasiAdvTuple(state["lo"], state["hi"], state["x1"], partial, queries)


# --------------------------------------------------------------------------
# step 3: random perturbation descent


@dataclass(frozen=True)
class AttackParams:
    u: float = DEFAULT_U
    N: int = DEFAULT_ITERS
    backend: Backend = Backend.DIRECT_F32
    seed: int = 0

    def __post_init__(self):
        if not self.u > 0:
            raise ValueError("perturbation bound u must be positive")
        if self.N < 1:
            raise ValueError("iteration count N must be at least 1")
        object.__setattr__(self, "backend", Backend(self.backend))


@dataclass
class AttackOutcome:
    """Result of one descent run; ``x_adv`` is None when the attack FAILED."""

    backend: Backend
    x_adv: np.ndarray | None
    final_image: np.ndarray
    cw_trace: list  # CW at entry followed by every accepted value
    iterations: int
    evaluations: int
    seed: int

    @property
    def success(self) -> bool:
        return self.x_adv is not None

    @property
    def accepted_steps(self) -> int:
        return len(self.cw_trace) - 1

    def as_dict(self) -> dict:
        return {"backend": self.backend.value, "status": "success" if self.success else "FAILED",
                "seed": self.seed, "iterations": self.iterations, "evaluations": self.evaluations,
                "accepted_steps": self.accepted_steps, "cw_initial": float(self.cw_trace[0]),
                "cw_final": float(self.cw_trace[-1])}


def random_perturb_attack(net: Network, x0: np.ndarray, t: int, x1: np.ndarray, eps: float,
                          params: AttackParams = AttackParams(), observer=None) -> AttackOutcome:
    """Stochastic descent on the backend's CW margin by tiny tile-wise perturbations.

    Each iteration visits the tiles of ``tile_geometry(backend)``, adds
    single-precision uniform noise in ``[-u, u]`` to the tile's window,
    clamps into ``[x_l, x_u]`` and keeps the change only if the backend CW
    strictly decreases.  ``observer(candidate, accepted, cw)`` is called for
    every candidate.  Randomness comes from a PCG64 generator seeded with
    ``params.seed``.
    """
    x0 = np.asarray(x0)
    region = PerturbationSet(x0, eps)
    if not region.contains(np.asarray(x1)):
        raise PreconditionError("x1 must lie in Adv(x0) in both precisions")
    backend = params.backend
    if backend.precision != "single":
        raise PreconditionError("the attack targets single-precision backends")
    geo = tile_geometry(backend)
    x_l, x_u, _, _ = clamp_bounds(x0, eps)
    rng = np.random.default_rng(params.seed)
    u = params.u
    m, n, _ = x0.shape

    def cw(x):
        return cw_loss(infer(backend, net, x, check=False), t)

    cur = np.array(x1, dtype=np.float32)
    cur_cw = cw(cur)
    trace = [cur_cw]
    evaluations = 1
    for _ in range(params.N):
        for h in range(0, m, geo.stride):
            for w in range(0, n, geo.stride):
                window = (slice(h + geo.offset, h + geo.stride), slice(w + geo.offset, w + geo.stride))
                cand = cur.copy()
                sub = cand[window]
                if sub.size == 0:
                    continue
                noise = rng.uniform(-u, u, size=sub.shape).astype(np.float32)
                cand[window] = sub + noise
                cand = np.maximum(np.minimum(cand, x_u), x_l)
                c = cw(cand)
                evaluations += 1
                accepted = c < cur_cw
                if observer is not None:
                    observer(cand, accepted, c)
                if accepted:
                    cur, cur_cw = cand, c
                    trace.append(c)
    x_adv = cur if cur_cw < 0 else None
    return AttackOutcome(backend, x_adv, cur, trace, params.N, evaluations, params.seed)


# --------------------------------------------------------------------------
# bias shift and validation


def bias_shift(net: Network, t0: int, tau0) -> Network:
    """Lower the target-class bias of the final dense layer by at most ``tau0``.

    The new bias is the single-precision value nearest to ``b - tau0`` that
    is not below it, so the shift never exceeds ``tau0`` and a model robust
    with tolerance ``tau0`` stays robust at tolerance zero.
    """
    if tau0 < 0:
        raise PreconditionError("tau0 must be nonnegative")
    last = net.layers[-1]
    if not isinstance(last, Dense):
        raise PreconditionError("final layer must be a dense layer with a bias")
    if not 0 <= t0 < last.rows:
        raise PreconditionError(f"class index {t0} out of range")
    if tau0 == 0:
        return net
    bias = last.bias.copy()
    target = Fraction(float(bias[t0])) - Fraction(tau0)
    nb = np.float32(float(target))
    if Fraction(float(nb)) < target:
        nb = np.nextafter(nb, np.float32(np.inf))
    bias[t0] = nb
    return net.replace_layer(len(net.layers) - 1, Dense(last.weight, bias))


@dataclass
class PairReport:
    in_unit_box: bool
    norm_single: bool
    norm_double: bool
    verified_robust: bool
    misclassified: bool
    linf_single: float
    linf_double: float
    verdict: str
    cw_backend: float
    backend: str

    @property
    def all_pass(self) -> bool:
        return all((self.in_unit_box, self.norm_single, self.norm_double, self.verified_robust,
                    self.misclassified))

    def as_dict(self) -> dict:
        return {"1_unit_box": self.in_unit_box, "2_norm_single": self.norm_single,
                "2p_norm_double": self.norm_double, "3_verified_robust": self.verified_robust,
                "4_misclassified": self.misclassified, "linf_single": self.linf_single,
                "linf_double": self.linf_double, "verdict": self.verdict,
                "cw_backend": self.cw_backend, "backend": self.backend, "all_pass": self.all_pass}


def validate_adversarial_pair(net: Network, x0: np.ndarray, x_adv: np.ndarray, eps: float, t0: int,
                              backend, *, time_limit: float = DEFAULT_TIME_LIMIT, mode: str = "double",
                              verdict: Verdict | None = None) -> PairReport:
    """Check the four conditions separately.

    1. both images lie in [0, 1]; 2. single-precision distance at most
    ``float32(eps)``; 2'. the same for the widened doubles against
    ``double(float32(eps))``; 3. the verifier proves ``x0`` robust (pass
    ``verdict`` to replay an earlier answer); 4. ``backend`` gives a
    negative CW margin on ``x_adv``.
    """
    x0 = np.asarray(x0)
    x_adv = np.asarray(x_adv)
    if x0.shape != x_adv.shape:
        raise PreconditionError("image shapes differ")
    if x0.dtype != np.float32 or x_adv.dtype != np.float32:
        raise PreconditionError("both images must be single precision")
    backend = Backend(backend)
    e32 = np.float32(eps)
    box = bool(np.all((x0 >= 0) & (x0 <= 1)) and np.all((x_adv >= 0) & (x_adv <= 1)))
    d32 = linf_distance(x_adv, x0)
    d64 = linf_distance(widen_to_double(x_adv), widen_to_double(x0))
    if verdict is None:
        verdict = verify_worst(net, PerturbationSet(x0, eps), t0, 0.0, mode, time_limit).verdict
    c = cw_loss(infer(backend, net, x_adv, check=False), t0)
    return PairReport(box, bool(d32 <= e32), bool(d64 <= float(e32)), verdict is Verdict.ROBUST,
                      bool(c < 0), float(d32), float(d64), Verdict(verdict).value, float(c), backend.value)


# --------------------------------------------------------------------------
# whole pipeline for one seed


@dataclass
class SeedReport:
    index: int
    label: int
    status: str  # "ok", "unbracketable", "not-robust", "discarded"
    alpha: AlphaSearchResult | None = None
    quasi: QuasiAdvTuple | None = None
    shifted_net: Network | None = None
    outcomes: dict = field(default_factory=dict)  # backend value -> AttackOutcome
    validations: dict = field(default_factory=dict)  # backend value -> PairReport
    cw_final: dict = field(default_factory=dict)  # backend value -> {backend value: cw}
    message: str = ""

    def as_dict(self) -> dict:
        d = {"index": self.index, "label": self.label, "status": self.status, "message": self.message}
        if self.alpha is not None:
            d["alpha"] = self.alpha.as_dict()
        if self.quasi is not None:
            d["quasi"] = self.quasi.as_dict()
            d["quasi"]["label"] = "partial-tau" if self.quasi.partial else "complete"
        d["attacks"] = {k: v.as_dict() for k, v in self.outcomes.items()}
        d["validation"] = {k: v.as_dict() for k, v in self.validations.items()}
        d["cw_final"] = self.cw_final
        return d


def attack_seed(net: Network, x_seed: np.ndarray, t0: int, eps: float, backends, *, index: int = 0,
                u: float = DEFAULT_U, iters: int = DEFAULT_ITERS, seed: int = 0, use_bias_shift: bool = False,
                time_limit: float = DEFAULT_TIME_LIMIT, mode: str = "double",
                delta_target: float = DELTA_TARGET) -> SeedReport:
    """Alpha search, quasi-adversarial search and one descent per backend."""
    backends = [Backend(b) for b in backends]
    report = SeedReport(index, int(t0), "ok")
    try:
        report.alpha = alpha_search(net, x_seed, eps, t0, delta_target, time_limit, mode)
    except UnbracketableSeed as exc:
        report.status, report.message = "unbracketable", str(exc)
        return report
    except PreconditionError as exc:
        report.status, report.message = "not-robust", str(exc)
        return report
    x0 = report.alpha.x0
    try:
        report.quasi = quasi_adv_search(net, x0, eps, t0, time_limit, mode=mode)
    except SeedDiscarded as exc:
        report.status, report.message = "discarded", str(exc)
        return report
    target = net
    if use_bias_shift:
        target = bias_shift(net, t0, report.quasi.tau0)
        report.shifted_net = target
    verdict = None
    for i, b in enumerate(backends):
        params = AttackParams(u, iters, b, seed + i)
        out = random_perturb_attack(target, x0, t0, report.quasi.x1, eps, params)
        report.outcomes[b.value] = out
        report.cw_final[b.value] = {o.value: float(cw_loss(infer(o, target, out.final_image, check=False), t0))
                                    for o in backends}
        if out.success:
            if verdict is None:
                verdict = verify_worst(target, PerturbationSet(x0, eps), t0, 0.0, mode, time_limit).verdict
            report.validations[b.value] = validate_adversarial_pair(
                target, x0, out.x_adv, eps, t0, b, mode=mode, verdict=verdict)
    return report
