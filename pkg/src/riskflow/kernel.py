"""Optimization engines shared by the equilibrium and robust solvers.

* ``project_simplex`` / ``FeasibleRegion``: Euclidean projections onto products
  of scaled simplices with optional auxiliary coordinates.
* ``minimize_convex``: projected gradient descent with Barzilai-Borwein trial
  steps, Armijo backtracking, and Polyak steps when backtracking stalls at a
  kink.
* ``solve_lp``: dense bounded-variable revised simplex.  Dantzig pricing is
  used until a run of degenerate pivots is detected; from then on Bland's rule
  is applied until the objective moves again.
* ``CutLP``: a cutting-plane model ``min c'X  s.t.  G X >= h, E X = q`` that is
  solved through its dual.  Appending cuts appends dual columns, so the last
  optimal basis stays primal feasible and is reused as a warm start.
* ``kelley_minimize``: Kelley's outer approximation driven by ``CutLP``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np


class KernelError(RuntimeError):
    pass


class KernelConfigError(KernelError):
    pass


# ---------------------------------------------------------------------------
# projections

def project_simplex(v, q: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = q}``."""
    if q <= 0:
        raise KernelConfigError("simplex scale q must be positive")
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - q
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


@dataclass(frozen=True)
class FeasibleRegion:
    """Product of scaled simplices, followed by bounded auxiliary coordinates."""

    blocks: tuple
    demands: tuple
    aux_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aux_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def for_network(cls, net, aux_lower=(), aux_upper=None):
        aux_lower = np.asarray(aux_lower, float)
        aux_upper = np.full(aux_lower.shape, np.inf) if aux_upper is None else np.asarray(aux_upper, float)
        return cls(tuple(net.od_slices), tuple(float(q) for q in net.demands), aux_lower, aux_upper)

    @property
    def n_flow(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    @property
    def dim(self) -> int:
        return self.n_flow + self.aux_lower.size

    def project(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        for sl, q in zip(self.blocks, self.demands):
            x[sl] = project_simplex(x[sl], q) if q > 0 else 0.0
        if self.aux_lower.size:
            x[self.n_flow:] = np.clip(x[self.n_flow:], self.aux_lower, self.aux_upper)
        return x

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, float)
        for sl, q in zip(self.blocks, self.demands):
            if np.any(x[sl] < -tol) or abs(x[sl].sum() - q) > tol * max(1.0, q):
                return False
        aux = x[self.n_flow:]
        return bool(np.all(aux >= self.aux_lower - tol) and np.all(aux <= self.aux_upper + tol))

    def interior_point(self) -> np.ndarray:
        x = np.zeros(self.dim)
        for sl, q in zip(self.blocks, self.demands):
            x[sl] = q / (sl.stop - sl.start)
        if self.aux_lower.size:
            lo, hi = self.aux_lower, self.aux_upper
            both = np.isfinite(lo) & np.isfinite(hi)
            mid = np.zeros_like(lo)
            mid[both] = 0.5 * (lo[both] + hi[both])
            x[self.n_flow:] = np.clip(mid, lo, hi)
        return x


# ---------------------------------------------------------------------------
# first-order convex minimization

class OptimResult(NamedTuple):
    x: np.ndarray
    value: float
    converged: bool
    iterations: int
    pg_norm: float
    message: str


def minimize_convex(oracle: Callable, region: FeasibleRegion, x0=None, gtol: float = 1e-7,
                    ftol: float = 1e-10, window: int = 50, max_iter: int = 200_000,
                    armijo: float = 1e-4) -> OptimResult:
    """Minimize a convex function over ``region``.

    ``oracle(x)`` returns ``(value, gradient)``; at kinks any subgradient will
    do.  Stops when ``||x - P(x - g)|| <= gtol * (1 + |value|)`` or when the
    objective has dropped by less than ``ftol`` (relative) over ``window``
    iterations, or by less than ``1000 * ftol`` over ``20 * window``.  The
    best iterate seen is returned.
    """
    x = region.project(region.interior_point() if x0 is None else x0)
    F, g = oracle(x)
    best_x, best_F = x.copy(), F
    step = 1.0 / max(1.0, np.linalg.norm(g))
    history = deque([F], maxlen=window + 1)
    polyak_gap = None
    pgn = np.inf
    crawl_window, crawl_tol = 20 * window, 1e3 * ftol
    checkpoint = np.inf
    for it in range(1, max_iter + 1):
        pgn = float(np.linalg.norm(x - region.project(x - g)))
        if pgn <= gtol * (1.0 + abs(F)):
            return OptimResult(best_x, best_F, True, it - 1, pgn, "projected gradient small")
        slack = 4e-16 * max(1.0, abs(F))
        t = step
        accepted = False
        for _ in range(60):
            xn = region.project(x - t * g)
            d = xn - x
            if not np.any(d):
                break
            Fn, gn = oracle(xn)
            if Fn <= F + armijo * float(g @ d) + slack:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # kink: Polyak step towards a target just below the incumbent
            gg = float(g @ g)
            if gg == 0.0:
                return OptimResult(best_x, best_F, True, it, pgn, "zero subgradient")
            polyak_gap = max(abs(best_F), 1.0) * 1e-6 if polyak_gap is None else 0.7 * polyak_gap
            if polyak_gap < 1e-15 * max(1.0, abs(best_F)):
                return OptimResult(best_x, best_F, True, it, pgn, "no descent at resolution limit")
            xn = region.project(x - (F - best_F + polyak_gap) / gg * g)
            Fn, gn = oracle(xn)
            d = xn - x
        else:
            polyak_gap = None
        y = gn - g
        sy = float(d @ y)
        step = float(d @ d) / sy if sy > 1e-300 else min(2.0 * max(t, 1e-12), 1e12)
        step = min(max(step, 1e-16), 1e16)
        x, F, g = xn, Fn, gn
        if F < best_F:
            best_x, best_F = x.copy(), F
        history.append(best_F)
        if len(history) > window and history[0] - best_F <= ftol * max(1.0, abs(best_F)):
            pgn = float(np.linalg.norm(best_x - region.project(best_x - oracle(best_x)[1])))
            return OptimResult(best_x, best_F, True, it, pgn, "objective stalled")
        # zig-zag along a kink: tiny but steady decrease that never trips the short window
        if it % crawl_window == 0:
            if checkpoint - best_F <= crawl_tol * max(1.0, abs(best_F)):
                pgn = float(np.linalg.norm(best_x - region.project(best_x - oracle(best_x)[1])))
                return OptimResult(best_x, best_F, True, it, pgn, "objective crawling")
            checkpoint = best_F
    return OptimResult(best_x, best_F, False, max_iter, pgn, "iteration cap reached")


# ---------------------------------------------------------------------------
# linear programming

@dataclass
class LinearProgram:
    """``min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lower <= x <= upper``."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def normalized(self):
        c = np.asarray(self.c, float).ravel()
        n = c.size
        A_ub = np.zeros((0, n)) if self.A_ub is None else np.asarray(self.A_ub, float).reshape(-1, n)
        b_ub = np.zeros(0) if self.b_ub is None else np.asarray(self.b_ub, float).ravel()
        A_eq = np.zeros((0, n)) if self.A_eq is None else np.asarray(self.A_eq, float).reshape(-1, n)
        b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        lo = np.zeros(n) if self.lower is None else np.asarray(self.lower, float).ravel()
        hi = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float).ravel()
        if A_ub.shape[0] != b_ub.size or A_eq.shape[0] != b_eq.size or lo.size != n or hi.size != n:
            raise KernelConfigError("inconsistent LP dimensions")
        for arr in (c, A_ub, b_ub, A_eq, b_eq):
            if not np.all(np.isfinite(arr)):
                raise KernelConfigError("LP coefficients must be finite")
        if np.any(lo > hi):
            raise KernelConfigError("lower bound exceeds upper bound")
        return c, A_ub, b_ub, A_eq, b_eq, lo, hi


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    fun: float = np.nan
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    basis: tuple = ()
    at_upper: tuple = ()
    iterations: int = 0
    residual: float = np.nan
    gap: float = np.nan

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


_LOWER, _UPPER, _FREE, _BASIC = 0, 1, 2, 3


class _Simplex:
    def __init__(self, c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol):
        m1, n = A_ub.shape
        m2 = A_eq.shape[0]
        self.n, self.m1, self.m = n, m1, m1 + m2
        m = self.m
        A = np.vstack([A_ub, A_eq])
        self.b = np.concatenate([b_ub, b_eq])
        slack = np.vstack([np.eye(m1), np.zeros((m2, m1))]) if m1 else np.zeros((m, 0))
        self.M = np.hstack([A, slack, np.eye(m)])  # artificial signs folded in later
        self.c = np.concatenate([c, np.zeros(m1 + m)])
        self.lo = np.concatenate([lo, np.zeros(m1), np.zeros(m)])
        self.hi = np.concatenate([hi, np.full(m1, np.inf), np.zeros(m)])
        self.n_cols = self.M.shape[1]
        self.art0 = n + m1
        self.tol = tol
        self.iterations = 0

    def _nonbasic_value(self, j):
        if np.isfinite(self.lo[j]):
            return self.lo[j], _LOWER
        if np.isfinite(self.hi[j]):
            return self.hi[j], _UPPER
        return 0.0, _FREE

    def _init_nonbasic(self):
        self.x = np.zeros(self.n_cols)
        self.status = np.empty(self.n_cols, dtype=int)
        for j in range(self.n_cols):
            self.x[j], self.status[j] = self._nonbasic_value(j)

    def cold_start(self):
        self._init_nonbasic()
        m, n, m1 = self.m, self.n, self.m1
        r = self.b - self.M[:, :n] @ self.x[:n]
        basis = []
        for i in range(m):
            if i < m1 and r[i] >= 0:
                basis.append(n + i)
            else:
                a = self.art0 + i
                self.M[:, a] = 0.0
                self.M[i, a] = 1.0 if r[i] >= 0 else -1.0
                self.hi[a] = np.inf
                basis.append(a)
        self.basis = np.array(basis, dtype=int)
        self.status[self.basis] = _BASIC
        self._refactor()

    def warm_start(self, basis, at_upper) -> bool:
        basis = np.asarray(basis, dtype=int)
        if basis.size != self.m or len(set(basis.tolist())) != self.m or np.any(basis >= self.n_cols):
            return False
        self._init_nonbasic()
        for j in at_upper:
            if j < self.n_cols and np.isfinite(self.hi[j]):
                self.x[j], self.status[j] = self.hi[j], _UPPER
        self.basis = basis
        self.status[basis] = _BASIC
        B = self.M[:, basis]
        if np.linalg.cond(B) > 1e12:
            return False
        self._refactor()
        xb = self.x[basis]
        ok = np.all(xb >= self.lo[basis] - 1e-9 * (1 + np.abs(xb))) and np.all(xb <= self.hi[basis] + 1e-9 * (1 + np.abs(xb)))
        if ok:
            self.x[basis] = np.clip(xb, self.lo[basis], self.hi[basis])
        return bool(ok)

    def _refactor(self):
        B = self.M[:, self.basis]
        self.Binv = np.linalg.inv(B)
        nb = self.status != _BASIC
        rhs = self.b - self.M[:, nb] @ self.x[nb]
        self.x[self.basis] = self.Binv @ rhs

    def run(self, cost, max_iter):
        tol = self.tol
        bland = False
        degenerate_run = 0
        since_refactor = 0
        last_obj = np.inf
        while self.iterations < max_iter:
            if since_refactor >= 50:
                self._refactor()
                since_refactor = 0
            y = cost[self.basis] @ self.Binv
            d = cost - y @ self.M
            st = self.status
            movable = self.hi > self.lo
            dtol = tol * (1.0 + np.abs(cost))
            cand = ((st == _LOWER) & (d < -dtol) & movable) | ((st == _UPPER) & (d > dtol) & movable) | \
                   ((st == _FREE) & (np.abs(d) > dtol))
            idx = np.nonzero(cand)[0]
            if idx.size == 0:
                return "optimal"
            q = int(idx[0]) if bland else int(idx[np.argmax(np.abs(d[idx]))])
            direction = 1.0 if d[q] < 0 else -1.0
            w = self.Binv @ self.M[:, q]
            delta = -direction * w
            xb = self.x[self.basis]
            lob, hib = self.lo[self.basis], self.hi[self.basis]
            ratios = np.full(self.m, np.inf)
            ptol = 1e-11
            dec = delta < -ptol
            inc = delta > ptol
            with np.errstate(invalid="ignore"):
                ratios[dec] = (xb[dec] - lob[dec]) / -delta[dec]
                ratios[inc] = (hib[inc] - xb[inc]) / delta[inc]
            ratios = np.where(np.isnan(ratios), np.inf, np.maximum(ratios, 0.0))
            flip = self.hi[q] - self.lo[q]
            theta = float(ratios.min()) if self.m else np.inf
            if not np.isfinite(theta) and not np.isfinite(flip):
                return "unbounded"
            self.iterations += 1
            if flip <= theta:
                theta = flip
                self.x[self.basis] = xb + theta * delta
                self.x[q] = self.hi[q] if st[q] == _LOWER else self.lo[q]
                st[q] = _UPPER if st[q] == _LOWER else _LOWER
            else:
                ties = np.nonzero(ratios <= theta + 1e-12 * max(1.0, theta))[0]
                if bland:
                    r = int(ties[np.argmin(self.basis[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(w[ties]))])
                self.x[self.basis] = xb + theta * delta
                self.x[q] = self.x[q] + direction * theta
                leaving = self.basis[r]
                if delta[r] < 0:
                    self.x[leaving], st[leaving] = self.lo[leaving], _LOWER
                else:
                    self.x[leaving], st[leaving] = self.hi[leaving], _UPPER
                self.basis[r] = q
                st[q] = _BASIC
                piv = w[r]
                row = self.Binv[r] / piv
                self.Binv -= np.outer(w, row)
                self.Binv[r] = row
                since_refactor += 1
            obj = float(cost @ self.x)
            if obj < last_obj - 1e-12 * max(1.0, abs(obj)):
                degenerate_run = 0
                bland = False
            else:
                degenerate_run += 1
                if degenerate_run > 30:
                    bland = True
            last_obj = obj
        return "iteration_limit"

    def drive_out_artificials(self):
        for r in range(self.m):
            j = self.basis[r]
            if j < self.art0:
                continue
            row = self.Binv[r] @ self.M[:, :self.art0]
            cand = np.nonzero((np.abs(row) > 1e-9) & (self.status[:self.art0] != _BASIC))[0]
            if cand.size == 0:
                continue  # redundant row, artificial stays basic at zero
            q = int(cand[np.argmax(np.abs(row[cand]))])
            w = self.Binv @ self.M[:, q]
            piv = w[r]
            newrow = self.Binv[r] / piv
            self.Binv -= np.outer(w, newrow)
            self.Binv[r] = newrow
            self.status[j] = _LOWER
            self.x[j] = 0.0
            self.basis[r] = q
            self.status[q] = _BASIC
        self._refactor()


def solve_lp(lp: LinearProgram, warm_basis=None, warm_at_upper=(), tol: float = 1e-9,
             max_iter: int | None = None) -> LPResult:
    """Solve ``lp`` with a dense revised simplex.

    ``warm_basis`` lists internal column indices (structural ``0..n-1``, then
    one slack per inequality row, then one artificial per row) as returned in
    ``LPResult.basis``.  An unusable warm basis silently falls back to a cold
    two-phase start.
    """
    c, A_ub, b_ub, A_eq, b_eq, lo, hi = lp.normalized()
    sx = _Simplex(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol)
    if max_iter is None:
        max_iter = 50 * (sx.n_cols + sx.m) + 1000
    warmed = warm_basis is not None and sx.warm_start(warm_basis, warm_at_upper)
    if not warmed:
        sx = _Simplex(c, A_ub, b_ub, A_eq, b_eq, lo, hi, tol)
        sx.cold_start()
        arts = np.arange(sx.art0, sx.n_cols)
        phase1 = np.zeros(sx.n_cols)
        phase1[arts] = (sx.hi[arts] > 0).astype(float)
        if phase1.any():
            status = sx.run(phase1, max_iter)
            if status == "iteration_limit":
                return LPResult("iteration_limit", iterations=sx.iterations)
            infeas = float(phase1 @ sx.x)
            if infeas > 1e-8 * max(1.0, float(np.max(np.abs(sx.b))) if sx.m else 1.0):
                return LPResult("infeasible", iterations=sx.iterations)
            sx.hi[arts] = 0.0
            sx.x[arts] = np.where(sx.status[arts] == _BASIC, sx.x[arts], 0.0)
            sx.drive_out_artificials()
    status = sx.run(sx.c, max_iter)
    if status != "optimal":
        return LPResult(status, iterations=sx.iterations)
    sx._refactor()
    return _finish(sx, c, A_ub, b_ub, A_eq, b_eq, lo, hi)


def _finish(sx, c, A_ub, b_ub, A_eq, b_eq, lo, hi):
    n = sx.n
    x = sx.x[:n].copy()
    y = sx.c[sx.basis] @ sx.Binv
    d = sx.c - y @ sx.M
    fun = float(c @ x)
    res = 0.0
    if A_ub.size:
        res = max(res, float(np.max(A_ub @ x - b_ub, initial=0.0)))
    if A_eq.size:
        res = max(res, float(np.max(np.abs(A_eq @ x - b_eq), initial=0.0)))
    res = max(res, float(np.max(lo - x, initial=0.0)), float(np.max(x - hi, initial=0.0)))
    nb = sx.status != _BASIC
    bound_vals = np.where(np.isfinite(sx.x[nb]), sx.x[nb], 0.0)
    dual_obj = float(y @ sx.b + d[nb] @ bound_vals)
    gap = abs(fun - dual_obj) / (1.0 + abs(fun))
    at_upper = tuple(int(j) for j in np.nonzero(sx.status == _UPPER)[0])
    return LPResult("optimal", x, fun, y[:sx.m1].copy(), y[sx.m1:].copy(), d[:n].copy(),
                    tuple(int(j) for j in sx.basis), at_upper, sx.iterations, res, gap)


# ---------------------------------------------------------------------------
# cutting-plane model solved through its dual

@dataclass
class CutLPResult:
    status: str
    X: np.ndarray | None
    value: float
    row_duals: dict
    iterations: int


class CutLP:
    """``min c'X  s.t.  G X >= h (rows added over time),  E X = q``.

    Variables flagged in ``nonneg`` are constrained to be ``>= 0``; the rest
    are free.  Finite boxes on free variables must be supplied as rows.
    """

    def __init__(self, c, nonneg, E=None, q=None):
        self.c = np.asarray(c, float)
        self.nonneg = np.asarray(nonneg, bool)
        self.n = self.c.size
        self.E = np.zeros((0, self.n)) if E is None else np.asarray(E, float).reshape(-1, self.n)
        self.q = np.zeros(0) if q is None else np.asarray(q, float).ravel()
        self.rows: dict[int, tuple[np.ndarray, float]] = {}
        self._next_id = 0
        self._warm_keys = None
        self.total_iterations = 0

    def add_row(self, g, h) -> int:
        rid = self._next_id
        self._next_id += 1
        self.rows[rid] = (np.asarray(g, float).copy(), float(h))
        return rid

    def remove_rows(self, ids):
        for rid in ids:
            self.rows.pop(rid, None)

    def row_activity(self, X) -> dict:
        return {rid: float(g @ X - h) for rid, (g, h) in self.rows.items()}

    def solve(self) -> CutLPResult:
        ids = list(self.rows)
        n_eq = self.q.size
        G = np.array([self.rows[r][0] for r in ids]).reshape(-1, self.n)
        h = np.array([self.rows[r][1] for r in ids])
        W = np.hstack([self.E.T, G.T])  # dual constraint matrix, one row per primal variable
        nn = np.nonzero(self.nonneg)[0]
        fr = np.nonzero(~self.nonneg)[0]
        n_struct = n_eq + len(ids)
        lp = LinearProgram(
            c=-np.concatenate([self.q, h]),
            A_ub=W[nn], b_ub=self.c[nn], A_eq=W[fr], b_eq=self.c[fr],
            lower=np.concatenate([np.full(n_eq, -np.inf), np.zeros(len(ids))]),
            upper=np.full(n_struct, np.inf),
        )
        keys = [("nu", i) for i in range(n_eq)] + [("row", r) for r in ids] + \
               [("slack", int(j)) for j in nn] + [("art", int(j)) for j in nn] + [("art", int(j)) for j in fr]
        pos = {k: i for i, k in enumerate(keys)}
        warm = None
        if self._warm_keys is not None:
            mapped = [pos.get(k) for k in self._warm_keys]
            if all(m is not None for m in mapped):
                warm = mapped
            else:
                # removed rows left the basis: keep the rest, patch with artificials
                warm = self._patch_basis(mapped, keys, pos, W, nn, fr)
        res = solve_lp(lp, warm_basis=warm)
        self.total_iterations += res.iterations
        if res.status == "unbounded":
            return CutLPResult("infeasible", None, np.nan, {}, res.iterations)
        if res.status == "infeasible":
            return CutLPResult("unbounded", None, -np.inf, {}, res.iterations)
        if not res.optimal:
            return CutLPResult(res.status, None, np.nan, {}, res.iterations)
        self._warm_keys = [keys[j] for j in res.basis]
        X = np.empty(self.n)
        X[nn] = -res.duals_ub
        X[fr] = -res.duals_eq
        duals = {r: float(res.x[n_eq + i]) for i, r in enumerate(ids)}
        return CutLPResult("optimal", X, -res.fun, duals, res.iterations)

    def _patch_basis(self, mapped, keys, pos, W, nn, fr):
        # rows of the dual LP: inequality rows (nn) first, then equalities (fr)
        order = list(nn) + list(fr)
        kept = [m for m in mapped if m is not None]
        covered = set()
        for k in kept:
            kind, j = keys[k]
            if kind in ("slack", "art"):
                covered.add(j)
        for j in order:
            if len(kept) >= len(order):
                break
            if j not in covered:
                kept.append(pos[("art", int(j))])
                covered.add(j)
        return kept if len(kept) == len(order) else None


# ---------------------------------------------------------------------------
# Kelley's cutting-plane method

class KelleyResult(NamedTuple):
    x: np.ndarray
    value: float
    lower_bound: float
    converged: bool
    iterations: int
    history: list


def kelley_minimize(oracle: Callable, region: FeasibleRegion, x0=None, tol: float = 1e-6,
                    max_iter: int = 5000) -> KelleyResult:
    """Minimize a convex ``oracle(x) -> (value, subgradient)`` by outer approximation.

    ``history`` holds ``(iteration, lb, ub, gap)`` tuples; ``lb`` never
    decreases and ``ub`` never increases.
    """
    n = region.dim
    nf = region.n_flow
    # variables: x then epigraph variable eta (free)
    nonneg = np.zeros(n + 1, bool)
    nonneg[:nf] = True
    E = np.zeros((len(region.blocks), n + 1))
    for i, sl in enumerate(region.blocks):
        E[i, sl] = 1.0
    c = np.zeros(n + 1)
    c[-1] = 1.0
    model = CutLP(c, nonneg, E, np.array(region.demands))
    for j in range(nf, n):
        lo, hi = region.aux_lower[j - nf], region.aux_upper[j - nf]
        e = np.zeros(n + 1)
        if np.isfinite(lo):
            e[j] = 1.0
            model.add_row(e, lo)
        if np.isfinite(hi):
            e = np.zeros(n + 1)
            e[j] = -1.0
            model.add_row(e, -hi)
    x = region.project(region.interior_point() if x0 is None else x0)
    F, g = oracle(x)
    best_x, ub, lb = x.copy(), F, -np.inf
    history = []

    def add_cut(x, F, g):
        row = np.concatenate([-g, [1.0]])
        model.add_row(row, F - g @ x)

    add_cut(x, F, g)
    for it in range(1, max_iter + 1):
        sol = model.solve()
        if sol.status == "unbounded":
            raise KernelConfigError("cut model is unbounded; supply finite boxes for auxiliary coordinates")
        if sol.status != "optimal":
            raise KernelError(f"cut model failed: {sol.status}")
        lb = max(lb, sol.value)
        x = region.project(sol.X[:n])
        F, g = oracle(x)
        if F < ub:
            ub, best_x = F, x.copy()
        gap = ub - lb
        history.append((it, lb, ub, gap))
        if gap <= tol * (1.0 + abs(ub)):
            return KelleyResult(best_x, ub, lb, True, it, history)
        add_cut(x, F, g)
    return KelleyResult(best_x, ub, lb, False, max_iter, history)
