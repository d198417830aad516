"""Best-first branch-and-bound over the binary variables of a :class:`MilpModel`."""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .encoding import MilpModel
from .lp import LPDeadline, LPNumericalError, solve_lp

log = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-6
OBJECTIVE_TOL = 1e-9
DEFAULT_TIME_LIMIT = 360.0


class Verdict(str, enum.Enum):
    ROBUST = "Robust"
    NOT_ROBUST = "NotRobust"
    TIMEOUT = "Timeout"


@dataclass
class Stats:
    nodes: int = 0
    lp_solves: int = 0
    lp_iterations: int = 0
    exact_fallbacks: int = 0
    wall_time: float = 0.0

    def as_dict(self, with_time: bool = False) -> dict:
        d = {"nodes": self.nodes, "lp_solves": self.lp_solves, "lp_iterations": self.lp_iterations,
             "exact_fallbacks": self.exact_fallbacks}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class VerifyResult:
    """Verdict plus the best objective information the search established.

    ``margin`` is the proven lower bound on the minimum for ``ROBUST`` and
    the objective value of ``counterexample`` for ``NOT_ROBUST``.
    ``lower_bound`` and ``incumbent`` bracket the global minimum and
    ``witness`` is the image attaining ``incumbent`` whatever the verdict.
    """

    verdict: Verdict
    margin: object = None
    counterexample: np.ndarray | None = None
    lower_bound: object = None
    incumbent: object = None
    stats: Stats = field(default_factory=Stats)
    witness: np.ndarray | None = None

    @property
    def robust(self) -> bool:
        return self.verdict is Verdict.ROBUST


class _Deadline(Exception):
    pass


def _solve(model: MilpModel, fixed: dict, stats: Stats, deadline: float | None = None):
    lp = model.relaxation(fixed)
    stats.lp_solves += 1
    try:
        res = solve_lp(lp, exact=model.exact, deadline=deadline)
    except LPNumericalError as exc:
        log.debug("double simplex failed (%s); re-solving exactly", exc)
        stats.exact_fallbacks += 1
        res = solve_lp(lp, exact=True, deadline=deadline)
        if res.status == "optimal":
            res.value = float(res.value)
            res.x = np.array([float(v) for v in res.x])
    stats.lp_iterations += res.iterations
    return res


def _most_fractional(model: MilpModel, x) -> int | None:
    best_j, best_f = None, INTEGRALITY_TOL if not model.exact else 0
    for j in model.binaries:
        v = x[j]
        f = min(v - math.floor(v), math.ceil(v) - v)
        if f > best_f:
            best_j, best_f = j, f
    return None if best_j is None else int(best_j)


def branch_and_bound(model: MilpModel, time_limit_s: float = DEFAULT_TIME_LIMIT, *,
                     optimize: bool = False, deterministic: bool = True) -> VerifyResult:
    """Decide whether ``min objective > model.threshold``.

    Nodes are explored best-first by LP bound (ties by insertion order) and
    split on the most fractional binary (ties to the lowest index).  With
    ``optimize`` the search runs to the exact optimum instead of stopping
    once the verdict is known.  The search is serial; ``deterministic`` is
    accepted for interface compatibility and always holds.
    """
    del deterministic
    stats = Stats()
    start = time.monotonic()
    tol = 0 if model.exact else OBJECTIVE_TOL
    tau = model.threshold
    inf = math.inf
    best_val, best_x = inf, None
    lower = inf  # smallest bound among nodes pruned against the threshold
    heap = []
    counter = itertools.count()

    def consider(value, x):
        nonlocal best_val, best_x
        if value is not None and value < best_val:
            best_val, best_x = value, x

    def deadline():
        if time.monotonic() - start > time_limit_s:
            raise _Deadline

    def process(fixed):
        """Solve a node; return True when the verdict became NotRobust."""
        deadline()
        stats.nodes += 1
        try:
            res = _solve(model, fixed, stats, start + time_limit_s)
        except LPDeadline:
            raise _Deadline from None
        if res.status != "optimal":
            return False
        if model.evaluate is not None:
            consider(model.evaluate(res.x), res.x)
        j = _most_fractional(model, res.x)
        if j is None:
            consider(res.value, res.x)
        elif res.value < best_val - tol:
            heapq.heappush(heap, (res.value, next(counter), fixed, j))
        return not optimize and best_val <= tau

    def result(verdict, margin=None, lb=None):
        stats.wall_time = time.monotonic() - start
        point = model.to_image(best_x) if best_x is not None else None
        cex = point if verdict is Verdict.NOT_ROBUST else None
        return VerifyResult(verdict, margin, cex, lb, best_val if best_x is not None else None, stats, point)

    try:
        if process({}):
            return result(Verdict.NOT_ROBUST, best_val)
        while heap:
            bound, _, fixed, j = heap[0]
            if bound >= best_val - tol:
                break
            if not optimize and bound > tau:
                lower = min(lower, bound)
                break
            heapq.heappop(heap)
            for val in (0, 1):
                child = dict(fixed)
                child[j] = Fraction(val) if model.exact else float(val)
                if process(child):
                    return result(Verdict.NOT_ROBUST, best_val)
    except _Deadline:
        res = result(Verdict.TIMEOUT)
        res.lower_bound = heap[0][0] if heap else None
        return res

    if heap:
        lower = min(lower, heap[0][0])
    proven = min(lower, best_val)
    if best_x is not None and best_val <= tau:
        return result(Verdict.NOT_ROBUST, best_val, proven)
    return result(Verdict.ROBUST, proven, proven)
