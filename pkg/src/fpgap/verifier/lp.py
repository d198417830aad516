"""Bounded-variable primal simplex with Bland's rule.

The same tableau code runs on float64 arrays or on object arrays of
:class:`fractions.Fraction`; in the latter case every comparison is exact.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FEAS_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-11
RESIDUAL_TOL = 1e-7
REFACTOR_EVERY = 50
MAX_CONDITION = 1e12

INF = math.inf


class LPNumericalError(ArithmeticError):
    """Double-precision simplex lost accuracy; callers retry in exact mode."""


class LPDeadline(Exception):
    """The caller's deadline passed during a solve."""


@dataclass
class LinearProgram:
    """``min c.x + c0`` s.t. ``A x (<=|>=|=) b`` and ``lb <= x <= ub``."""

    c: np.ndarray
    A: np.ndarray
    senses: list
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    c0: object = 0.0

    @property
    def exact(self) -> bool:
        return self.A.dtype == object or self.c.dtype == object


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    value: object = None
    x: np.ndarray | None = None
    iterations: int = 0


def _frac_array(values) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        if isinstance(v, Fraction):
            out[i] = v
        elif isinstance(v, float) and math.isinf(v):
            out[i] = v
        else:
            out[i] = Fraction(v)
    return out


def to_exact(lp: LinearProgram) -> LinearProgram:
    if lp.exact:
        return lp
    A = np.empty(lp.A.shape, dtype=object)
    for idx, v in np.ndenumerate(lp.A):
        A[idx] = Fraction(float(v))
    return LinearProgram(
        c=_frac_array(lp.c), A=A, senses=list(lp.senses), b=_frac_array(lp.b),
        lb=_frac_array(lp.lb), ub=_frac_array(lp.ub), c0=Fraction(float(lp.c0)),
    )


class _Tableau:
    def __init__(self, lp: LinearProgram, max_iter: int | None, deadline: float | None = None):
        self.exact = lp.exact
        m, n = lp.A.shape
        self.m, self.n = m, n
        zero = Fraction(0) if self.exact else 0.0
        one = Fraction(1) if self.exact else 1.0
        self.zero, self.one = zero, one
        self.tol = 0 if self.exact else DUAL_TOL
        self.feas_tol = 0 if self.exact else FEAS_TOL
        self.piv_tol = 0 if self.exact else PIVOT_TOL

        lb = list(lp.lb)
        ub = list(lp.ub)
        for j in range(n):
            if not (math.isfinite(lb[j]) or math.isfinite(ub[j])):
                raise ValueError("free variables are not supported")
            if lb[j] > ub[j]:
                raise ValueError("variable with empty bound interval")
        start = [lb[j] if math.isfinite(lb[j]) else ub[j] for j in range(n)]
        status = [0 if math.isfinite(lb[j]) else 1 for j in range(n)]

        A = lp.A
        resid = [lp.b[i] - sum((A[i, j] * start[j] for j in range(n) if start[j] != 0), zero)
                 for i in range(m)] if self.exact else list(lp.b - A @ np.asarray(start, dtype=float))
        slack_bounds = {"<=": (zero, INF), ">=": (-INF, zero), "=": (zero, zero)}

        cols_art = []
        basis = []
        beta = []
        row_sign = []
        for i in range(m):
            sl, su = slack_bounds[lp.senses[i]]
            lb.append(sl)
            ub.append(su)
            r = resid[i]
            if sl <= r <= su:
                basis.append(n + i)
                beta.append(r)
                row_sign.append(one)
                status.append(2)
            else:
                sv = sl if r < sl else su
                status.append(0 if sv == sl else 1)
                sign = one if r - sv > 0 else -one
                cols_art.append((i, sign))
                basis.append(None)
                beta.append(abs(r - sv))
                row_sign.append(sign)
        n_art = len(cols_art)
        N = n + m + n_art
        dtype = object if self.exact else np.float64
        T = np.empty((m, N), dtype=dtype) if self.exact else np.zeros((m, N))
        if self.exact:
            T.fill(zero)
        T[:, :n] = A
        for i in range(m):
            T[i, n + i] = one
        for k, (i, sign) in enumerate(cols_art):
            T[i, n + m + k] = sign
            basis[i] = n + m + k
            lb.append(zero)
            ub.append(INF)
            status.append(2)
        for i in range(m):
            if row_sign[i] != one:
                T[i, :] = T[i, :] * row_sign[i]
        self.T = T
        self.T0 = None if self.exact else T.copy()
        self.b0 = None if self.exact else np.asarray(lp.b, dtype=float) * np.asarray(row_sign, dtype=float)
        self.deadline = deadline
        self.since_refactor = 0
        self.N = N
        basis = np.array(basis, dtype=np.int64)
        self.n_art = n_art
        self.basis = basis
        self.status = np.array(status)
        self.beta = np.array(beta, dtype=dtype) if not self.exact else _obj(beta)
        self.lb = _obj(lb) if self.exact else np.array(lb, dtype=float)
        self.ub = _obj(ub) if self.exact else np.array(ub, dtype=float)
        self.lb_fin = np.array([math.isfinite(v) for v in lb])
        self.ub_fin = np.array([math.isfinite(v) for v in ub])
        self.iterations = 0
        self.max_iter = max_iter if max_iter is not None else 50 * (m + N) + 100

    def value_of(self, j):
        s = self.status[j]
        if s == 0:
            return self.lb[j]
        if s == 1:
            return self.ub[j]
        return self.beta[int(np.flatnonzero(self.basis == j)[0])]

    def set_costs(self, c_full):
        self.c = c_full
        cB = np.array([c_full[j] for j in self.basis], dtype=self.T.dtype)
        if self.exact:
            self.d = c_full - cB.dot(self.T) if self.m else c_full.copy()
        else:
            self.d = c_full - cB @ self.T

    def refactor(self) -> None:
        """Rebuild tableau, basic values and reduced costs from the original rows."""
        B = self.T0[:, self.basis]
        try:
            if self.m and np.linalg.cond(B) > MAX_CONDITION:
                raise LPNumericalError("basis matrix is ill-conditioned")
            Binv = np.linalg.inv(B) if self.m else B
        except np.linalg.LinAlgError as exc:
            raise LPNumericalError("singular basis matrix") from exc
        nonbasic = self.status != 2
        xN = np.where(self.status == 0, self.lb, self.ub)
        xN = np.where(nonbasic, xN, 0.0)
        xN[~np.isfinite(xN)] = 0.0
        self.T = Binv @ self.T0
        self.T[:, self.basis] = np.eye(self.m)
        self.beta = Binv @ (self.b0 - self.T0 @ xN)
        lo, hi = self.lb[self.basis], self.ub[self.basis]
        slack = FEAS_TOL * (1.0 + np.abs(self.beta))
        if np.any(self.beta < lo - slack) or np.any(self.beta > hi + slack):
            raise LPNumericalError("basic solution infeasible after refactorisation")
        self.beta = np.clip(self.beta, lo, hi)
        self.set_costs(self.c)
        self.since_refactor = 0

    def run(self) -> str:
        fixed = np.array([self.lb[j] == self.ub[j] for j in range(self.N)])
        while True:
            if self.iterations >= self.max_iter:
                raise LPNumericalError("simplex iteration limit reached")
            if self.deadline is not None and self.iterations % 32 == 0 and time.monotonic() > self.deadline:
                raise LPDeadline
            if not self.exact and self.since_refactor >= REFACTOR_EVERY:
                self.refactor()
            d = self.d
            at_lb = self.status == 0
            at_ub = self.status == 1
            cand = ((at_lb & (d < -self.tol)) | (at_ub & (d > self.tol))) & ~fixed
            idx = np.flatnonzero(cand)
            if idx.size == 0:
                if self.exact or self.since_refactor == 0:
                    return "optimal"
                self.refactor()
                continue
            q = int(idx[0])
            dirn = 1 if self.status[q] == 0 else -1
            col = self.T[:, q]

            theta = self.ub[q] - self.lb[q]
            if self.exact:
                best, leave, leave_to = self._ratio_exact(col, dirn, theta)
            else:
                best, leave, leave_to = self._ratio_float(col, dirn, theta)
            if leave < 0 and not math.isfinite(best):
                return "unbounded"
            self.iterations += 1
            self.since_refactor += 1
            theta = best
            self.beta = self.beta - (dirn * theta) * col
            if leave < 0:
                self.status[q] = 1 - self.status[q]
                continue
            entering_value = (self.lb[q] if self.status[q] == 0 else self.ub[q]) + dirn * theta
            self._pivot(leave, q)
            old = self.basis[leave]
            self.status[old] = leave_to
            self.basis[leave] = q
            self.status[q] = 2
            self.beta[leave] = entering_value

    def _ratio_exact(self, col, dirn, theta):
        best, leave, leave_to = theta, -1, None
        for i in range(self.m):
            a = col[i]
            if a == 0:
                continue
            rate = -dirn * a
            j = self.basis[i]
            if rate < 0:
                if not self.lb_fin[j]:
                    continue
                t = (self.beta[i] - self.lb[j]) / (-rate)
                to = 0
            else:
                if not self.ub_fin[j]:
                    continue
                t = (self.ub[j] - self.beta[i]) / rate
                to = 1
            if t < 0:
                t = self.zero
            if t < best or (t == best and leave >= 0 and j < self.basis[leave]):
                best, leave, leave_to = t, i, to
        return best, leave, leave_to

    def _ratio_float(self, col, dirn, theta):
        bas = self.basis
        rate = -dirn * col
        usable = np.abs(col) > self.piv_tol
        t = np.full(self.m, INF)
        down = usable & (rate < 0) & self.lb_fin[bas]
        up = usable & (rate > 0) & self.ub_fin[bas]
        t[down] = (self.beta[down] - self.lb[bas[down]]) / (-rate[down])
        t[up] = (self.ub[bas[up]] - self.beta[up]) / rate[up]
        np.maximum(t, 0.0, out=t)
        if self.m == 0:
            return theta, -1, None
        tmin = t.min()
        if not tmin < theta:
            return theta, -1, None
        rows = np.flatnonzero(t == tmin)
        leave = int(rows[np.argmin(bas[rows])])
        return tmin, leave, (0 if down[leave] else 1)

    def _pivot(self, p, q):
        T = self.T
        piv = T[p, q]
        T[p, :] = T[p, :] / piv
        colq = T[:, q].copy()
        colq[p] = self.zero
        T -= np.outer(colq, T[p, :])
        T[:, q] = self.zero
        T[p, q] = self.one
        self.d = self.d - self.d[q] * T[p, :]
        self.d[q] = self.zero

    def primal(self) -> np.ndarray:
        x = np.where(self.status == 0, self.lb, self.ub)
        x = x.astype(object) if self.exact else x.astype(float)
        for i, j in enumerate(self.basis):
            x[j] = self.beta[i]
        return x


def _obj(values) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        out[i] = v
    return out


def _check_residual(lp: LinearProgram, x: np.ndarray) -> None:
    act = lp.A @ x
    scale = 1.0 + np.abs(lp.b)
    for i, s in enumerate(lp.senses):
        r = act[i] - lp.b[i]
        if (s == "<=" and r > RESIDUAL_TOL * scale[i]) or (s == ">=" and r < -RESIDUAL_TOL * scale[i]) \
                or (s == "=" and abs(r) > RESIDUAL_TOL * scale[i]):
            raise LPNumericalError(f"row {i} violated by {r:g}")
    if np.any(x < lp.lb - RESIDUAL_TOL) or np.any(x > lp.ub + RESIDUAL_TOL):
        raise LPNumericalError("variable bound violated")


def solve_lp(lp: LinearProgram, *, exact: bool | None = None, max_iter: int | None = None,
             deadline: float | None = None) -> LPResult:
    """Two-phase primal simplex; Bland's smallest-index rule for both pivot choices.

    Double mode refactors the tableau every ``REFACTOR_EVERY`` pivots and
    before declaring optimality, and raises :class:`LPNumericalError` when
    the final point violates the constraints by more than ``RESIDUAL_TOL``.
    ``deadline`` is a ``time.monotonic()`` value after which
    :class:`LPDeadline` is raised.
    """
    if exact or (exact is None and lp.exact):
        lp = to_exact(lp)
    m, n = lp.A.shape
    tab = _Tableau(lp, max_iter, deadline)
    if tab.n_art:
        c1 = np.empty(tab.N, dtype=tab.T.dtype) if tab.exact else np.zeros(tab.N)
        if tab.exact:
            c1.fill(Fraction(0))
        c1[n + m:] = tab.one
        tab.set_costs(c1)
        tab.run()
        infeas = sum((tab.value_of(j) for j in range(n + m, tab.N)), tab.zero)
        scale = 1.0 + (float(max((abs(v) for v in lp.b), default=0)) if m else 0.0)
        if infeas > tab.feas_tol * scale:
            return LPResult("infeasible", iterations=tab.iterations)
        for j in range(n + m, tab.N):
            tab.lb[j] = tab.zero
            tab.ub[j] = tab.zero
            tab.ub_fin[j] = True
            if tab.status[j] != 2:
                tab.status[j] = 0
    c2 = np.empty(tab.N, dtype=tab.T.dtype) if tab.exact else np.zeros(tab.N)
    if tab.exact:
        c2.fill(Fraction(0))
    c2[:n] = lp.c
    tab.set_costs(c2)
    status = tab.run()
    if status == "unbounded":
        return LPResult("unbounded", iterations=tab.iterations)
    x = tab.primal()[:n]
    if not tab.exact:
        x = np.clip(x, lp.lb, lp.ub)
        _check_residual(lp, x)
        value = float(lp.c @ x) + float(lp.c0)
    else:
        value = sum((ci * xi for ci, xi in zip(lp.c, x) if ci != 0), Fraction(0)) + lp.c0
    return LPResult("optimal", value=value, x=x, iterations=tab.iterations)
