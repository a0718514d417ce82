"""Wasserstein distributionally robust truncated-logit equilibria.

The robust objective for a flow vector ``f`` is

    sup_Q  (1 - w) E_Q[Z(f)] + w CVaR_Q(Z(f))  +  Psi(f) / theta

with ``Q`` ranging over 1-Wasserstein balls around weighted empirical laws.
Regime structure is expressed as blocks: each block has its own samples,
radius and candidate support, and blocks are mixed with frequencies ``p``
that are either fixed or allowed to move in an l1 ball.  A single stationary
ball is the one-block special case.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import (FlowSolution, entropy_gradient, entropy_term, generalized_costs, solve_approach_B)
from .kernel import CutLP
from .network import NetworkInstance
from .risk import RiskProfile, _tail
from .scenarios import CostTable, ScenarioSet, compile_costs, linear_scenarios

TRACE_COLUMNS = ("iter", "lb", "ub", "gap", "cuts", "seps_skipped", "time_ms")


class DroError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# radius calibration

def calibrate_radius(N: int, delta: float, m: int, nu: float, c1: float, c2: float) -> float:
    """Finite-sample radius from the light-tail concentration bound."""
    if N < 1:
        raise DroError("N must be at least 1")
    if not 0.0 < delta < 1.0:
        raise DroError("delta must lie in (0, 1)")
    if c1 <= 0 or c2 <= 0 or nu <= 1 or m < 1:
        raise DroError("need c1, c2 > 0, nu > 1 and m >= 1")
    if m == 2:
        raise DroError("the closed-form radius needs m != 2")
    scale = np.log(c1 / delta) / c2
    if scale <= 0:
        raise DroError("log(c1/delta) must be positive")
    expo = 1.0 / max(m, 2) if N >= scale else 1.0 / nu
    return float((scale / N) ** expo)


def split_confidence(delta: float, counts: dict) -> dict:
    """Share a confidence budget across regimes proportionally to sample counts."""
    total = sum(counts.values())
    return {w: delta * n / total for w, n in counts.items()}


# ---------------------------------------------------------------------------
# hinge payoff and the discrete worst case

@dataclass(frozen=True)
class HingePayoff:
    lam_bar: float
    alpha: float
    t: float

    @property
    def tail_scale(self) -> float:
        return self.lam_bar / (1.0 - self.alpha)

    def __call__(self, z):
        z = np.asarray(z, float)
        return (1.0 - self.lam_bar) * z + self.tail_scale * np.maximum(z - self.t, 0.0)


@dataclass(frozen=True)
class WorstCase:
    value: float
    kappa: float
    plan: np.ndarray  # (N, M) transport plan, rows sum to the sample weights
    marginal: np.ndarray  # (M,)


def _envelope(g: np.ndarray, d: np.ndarray, tol: float = 1e-12):
    """Upper envelope of ``g_j - kappa d_j`` on ``kappa >= 0`` as (breakpoints, lines)."""
    top = g.max()
    scale = tol * (1.0 + abs(top))
    cand = np.nonzero(g >= top - scale)[0]
    cur = int(cand[np.argmin(d[cand])])
    ks, js = [0.0], [cur]
    kc = 0.0
    while True:
        lower = np.nonzero(d < d[cur] - 1e-15)[0]
        if lower.size == 0:
            break
        kx = (g[cur] - g[lower]) / (d[cur] - d[lower])
        kx = np.maximum(kx, kc)
        kmin = kx.min()
        close = lower[kx <= kmin + tol * (1.0 + kmin)]
        nxt = int(close[np.argmin(d[close])])
        kc = float(kmin)
        ks.append(kc)
        js.append(nxt)
        cur = nxt
    return ks, js


def _block_worst_case(g, D, weights, rho):
    """``min_k k rho + sum_i w_i max_j (g_j - k D_ij)`` with optimal plan."""
    N, M = D.shape
    envs = [_envelope(g, D[i]) for i in range(N)]
    active = np.array([e[1][0] for e in envs])
    slope = rho - float(weights @ D[np.arange(N), active])
    left = active.copy()
    kappa = 0.0
    if slope < 0:
        events = sorted((e[0][k], i, e[1][k]) for i, e in enumerate(envs) for k in range(1, len(e[0])))
        pos = 0
        found = False
        while pos < len(events):
            kappa = events[pos][0]
            left = active.copy()
            while pos < len(events) and events[pos][0] <= kappa + 1e-12 * (1.0 + kappa):
                _, i, j = events[pos]
                active[i] = j
                pos += 1
            slope = rho - float(weights @ D[np.arange(N), active])
            if slope >= 0:
                found = True
                break
        if not found:
            raise DroError("the ambiguity ball contains no law on this support (radius too small)")
    right = active
    rows = np.arange(N)
    cost_l = float(weights @ D[rows, left])
    cost_r = float(weights @ D[rows, right])
    eta = 0.0 if cost_l - cost_r <= 1e-300 else min(1.0, max(0.0, (rho - cost_r) / (cost_l - cost_r)))
    if kappa == 0.0:
        eta = 0.0
    plan = np.zeros((N, M))
    np.add.at(plan, (rows, left), eta * weights)
    np.add.at(plan, (rows, right), (1.0 - eta) * weights)
    value = kappa * rho + float(weights @ (g[right] - kappa * D[rows, right]))
    return WorstCase(value, kappa, plan, plan.sum(axis=0))


def pairwise_distances(samples, candidates) -> np.ndarray:
    a = np.atleast_2d(np.asarray(samples, float))
    b = np.atleast_2d(np.asarray(candidates, float))
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2), 0.0))


def worst_case_expectation_discrete(payoff, samples, candidates, rho: float, weights=None) -> WorstCase:
    """Worst-case expectation of ``payoff`` (one value per candidate) over the ball.

    The dual ``min_k k rho + sum_i w_i max_j (payoff_j - k ||zeta_j - xi_i||)``
    is piecewise linear in ``k``; it is minimized exactly by sweeping the
    breakpoints of the per-sample upper envelopes.
    """
    payoff = np.asarray(payoff, float)
    if payoff.size == 0:
        raise DroError("empty candidate support")
    if rho < 0:
        raise DroError("radius must be nonnegative")
    D = pairwise_distances(samples, candidates)
    if D.shape[1] != payoff.size:
        raise DroError("one payoff value per candidate is required")
    w = np.full(D.shape[0], 1.0 / D.shape[0]) if weights is None else np.asarray(weights, float)
    return _block_worst_case(payoff, D, w, float(rho))


# ---------------------------------------------------------------------------
# ambiguity specification

@dataclass(frozen=True)
class AmbiguityBlock:
    label: str
    samples: np.ndarray  # (N_b, m)
    weights: np.ndarray  # (N_b,), sums to 1
    radius: float
    candidates: ScenarioSet  # candidate support with coordinates in .xi

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, float))
        w = np.asarray(self.weights, float)
        if w.shape != (s.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DroError(f"block {self.label}: sample weights must be nonnegative and sum to 1")
        if self.radius < 0:
            raise DroError(f"block {self.label}: negative radius")
        if self.candidates.xi is None:
            raise DroError(f"block {self.label}: candidates need coordinates")
        if self.candidates.xi.shape[1] != s.shape[1]:
            raise DroError(f"block {self.label}: sample and candidate dimensions differ")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class AmbiguitySpec:
    blocks: tuple
    frequencies: np.ndarray
    epsilon_p: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.frequencies, float)
        if p.shape != (len(self.blocks),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DroError("block frequencies must be nonnegative and sum to 1")
        if self.epsilon_p < 0:
            raise DroError("frequency budget must be nonnegative")
        object.__setattr__(self, "frequencies", p)

    @classmethod
    def stationary(cls, candidates: ScenarioSet, rho: float, samples=None, weights=None) -> "AmbiguitySpec":
        """One ball; by default centred on the candidates themselves, weighted by their probabilities."""
        if samples is None:
            samples, weights = candidates.xi, candidates.probs if weights is None else weights
        samples = np.atleast_2d(np.asarray(samples, float))
        if weights is None:
            weights = np.full(samples.shape[0], 1.0 / samples.shape[0])
        return cls((AmbiguityBlock("all", samples, np.asarray(weights, float), float(rho), candidates),),
                   np.array([1.0]))

    @classmethod
    def regimes(cls, blocks: dict, radii: dict, frequencies: dict, epsilon_p: float = 0.0) -> "AmbiguitySpec":
        """``blocks`` maps regime label to a ScenarioSet whose atoms are both samples and support."""
        labels = list(blocks)
        out = []
        for w in labels:
            sc = blocks[w]
            n = sc.n_scenarios
            out.append(AmbiguityBlock(w, sc.xi, np.full(n, 1.0 / n), float(radii[w]), sc))
        return cls(tuple(out), np.array([frequencies[w] for w in labels], float), float(epsilon_p))

    @property
    def labels(self):
        return tuple(b.label for b in self.blocks)

    def with_frequencies(self, p, epsilon_p=None) -> "AmbiguitySpec":
        return AmbiguitySpec(self.blocks, np.asarray(p, float), self.epsilon_p if epsilon_p is None else epsilon_p)

    def single_block(self, b: int) -> "AmbiguitySpec":
        return AmbiguitySpec((self.blocks[b],), np.array([1.0]))


def worst_frequencies(p_hat, values, epsilon: float) -> np.ndarray:
    """Maximize ``p @ values`` over the simplex intersected with an l1 ball around ``p_hat``."""
    p_hat = np.asarray(p_hat, float)
    values = np.asarray(values, float)
    p = p_hat.copy()
    if epsilon <= 0 or p.size == 1:
        return p
    top = int(np.argmax(values))
    budget = min(0.5 * epsilon, 1.0 - p[top])
    for b in np.argsort(values, kind="stable"):
        if budget <= 0:
            break
        if b == top:
            continue
        move = min(p[b], budget)
        p[b] -= move
        p[top] += move
        budget -= move
    return p


# ---------------------------------------------------------------------------
# exact evaluation of the robust objective

@dataclass(frozen=True)
class RobustValue:
    value: float  # robust risk part plus entropy
    risk: float
    t: float
    kappas: np.ndarray
    frequencies: np.ndarray
    marginal: np.ndarray  # worst-case law over the stacked candidates
    potentials: np.ndarray


class RobustEvaluator:
    """Exact robust objective on finite supports, for fixed flows."""

    def __init__(self, net: NetworkInstance, spec: AmbiguitySpec, profile: RiskProfile):
        self.net, self.spec, self.profile = net, spec, profile
        params, offsets = [], []
        for b in spec.blocks:
            offsets.append(len(params))
            params.extend(b.candidates.params)
        self.costs: CostTable = compile_costs(params, net.n_links)
        self.slices = [slice(o, o + b.candidates.n_scenarios) for o, b in zip(offsets, spec.blocks)]
        self.D = [pairwise_distances(b.samples, b.candidates.xi) for b in spec.blocks]
        for b, D in zip(spec.blocks, self.D):
            if b.radius < float(b.weights @ D.min(axis=1)) - 1e-12:
                raise DroError(f"block {b.label}: radius below the distance from samples to the support")
        self.lam_bar, self.alpha = profile.lam_bar, profile.alpha
        self.c = profile.lam_bar / (1.0 - profile.alpha)

    @property
    def n_candidates(self) -> int:
        return self.costs.n_scenarios

    def potentials(self, f) -> np.ndarray:
        return self.costs.potentials(np.maximum(self.net.incidence @ np.maximum(f, 0.0), 0.0))

    def _cases(self, z, t):
        g = HingePayoff(self.lam_bar, self.alpha, t)(z)
        cases = [_block_worst_case(g[sl], D, b.weights, b.radius)
                 for b, sl, D in zip(self.spec.blocks, self.slices, self.D)]
        vals = np.array([c.value for c in cases])
        p = worst_frequencies(self.spec.frequencies, vals, self.spec.epsilon_p)
        return cases, p, float(self.lam_bar * t + p @ vals)

    def _marginal(self, cases, p):
        q = np.zeros(self.n_candidates)
        for pb, c, sl in zip(p, cases, self.slices):
            q[sl] += pb * c.marginal
        return q

    def value_at(self, z, t):
        cases, p, h = self._cases(z, t)
        q = self._marginal(cases, p)
        return h, self.lam_bar - self.c * float(q[z > t].sum()), cases, p, q

    def minimize_t(self, z):
        """Exact minimization over the threshold of a convex piecewise-linear function."""
        lo, hi = float(z.min()), float(z.max())
        if self.lam_bar == 0.0 or hi - lo <= 1e-14 * (1.0 + abs(hi)):
            h, _, cases, p, q = self.value_at(z, lo)
            return lo, h, cases, p, q
        h_lo, s_lo, *_ = self.value_at(z, lo)
        h_hi, s_hi, *_ = self.value_at(z, hi)
        t = lo if s_lo >= 0 else hi if s_hi <= 0 else None
        it = 0
        while t is None and it < 500:
            it += 1
            tx = (h_hi - h_lo + s_lo * lo - s_hi * hi) / (s_lo - s_hi)
            tx = min(max(tx, lo), hi)
            model = h_lo + s_lo * (tx - lo)
            hx, sx, *_ = self.value_at(z, tx)
            if hx - model <= 1e-13 * (1.0 + abs(hx)) or sx == 0.0 or hi - lo <= 1e-15 * (1.0 + abs(hi)):
                t = tx
            elif sx > 0:
                hi, h_hi, s_hi = tx, hx, sx
            else:
                lo, h_lo, s_lo = tx, hx, sx
        if t is None:
            t = 0.5 * (lo + hi)
        h, _, cases, p, q = self.value_at(z, t)
        q = self._saddle_marginal(z, t, q)
        return t, h, cases, p, q

    def _saddle_marginal(self, z, t, q):
        # mix the laws that are optimal just left and right of t so that t is their VaR
        if self.lam_bar == 0.0:
            return q
        eps = 1e-9 * (1.0 + abs(t))
        ql = self.value_at(z, t - eps)[4]
        qr = self.value_at(z, t + eps)[4]
        tail = 1.0 - self.alpha
        at_or_above = lambda qq: float(qq[z >= t - 1e-12 * (1.0 + abs(t))].sum())
        br, bl = at_or_above(qr), at_or_above(ql)
        if br >= tail - 1e-15:
            return qr
        eta = 1.0 if bl - br <= 1e-300 else min(1.0, (tail - br) / (bl - br))
        return eta * ql + (1.0 - eta) * qr

    def evaluate(self, f, entropy_inside: bool = False) -> RobustValue:
        f = np.maximum(np.asarray(f, float), 0.0)
        ent = entropy_term(f) / self.profile.theta
        z = self.potentials(f)
        if entropy_inside:
            z = z + ent
        t, h, cases, p, q = self.minimize_t(z)
        total = h if entropy_inside else h + ent
        return RobustValue(total, h, t, np.array([c.kappa for c in cases]), p, q, z)

    def weights_for_gradient(self, rv: RobustValue) -> np.ndarray:
        chi = _tail(rv.potentials, rv.marginal, self.alpha).weights if self.lam_bar > 0 else 0.0
        return (1.0 - self.lam_bar) * rv.marginal + self.c * rv.marginal * chi

    def objective_and_gradient(self, f):
        rv = self.evaluate(f)
        pw = self.weights_for_gradient(rv)
        tau = self.costs.times(self.net.incidence @ np.maximum(f, 0.0)) @ self.net.incidence
        return rv.value, pw @ tau + entropy_gradient(f) / self.profile.theta


# ---------------------------------------------------------------------------
# Benders exchange

@dataclass
class DroResult:
    solution: FlowSolution
    lower_bound: float
    upper_bound: float
    gap: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    t: float = 0.0
    kappas: np.ndarray | None = None
    frequencies: np.ndarray | None = None
    worst_case: np.ndarray | None = None
    seps_skipped: int = 0
    active_cuts: int = 0

    @property
    def relative_gap(self) -> float:
        return self.gap / (1.0 + abs(self.upper_bound))


class _Layout:
    def __init__(self, K, B, N, M, F):
        self.K, self.B, self.N, self.M, self.F = K, B, N, M, F
        o = 0
        self.f = slice(o, o + K); o += K
        self.t = o; o += 1
        self.sigma = o; o += 1
        self.kappa = slice(o, o + B); o += B
        self.s = slice(o, o + N); o += N
        self.u = slice(o, o + M); o += M
        self.w = slice(o, o + F); o += F
        self.e = slice(o, o + K); o += K
        self.n = o


def _feature_value(x, p):
    return x ** p / p


def _psi(f):
    return (f + 1.0) * np.log1p(f) - f


def benders_exchange(net: NetworkInstance, spec: AmbiguitySpec, profile: RiskProfile, eps_sep: float = 1e-7,
                     eps_gap: float = 1e-6, max_iter: int = 2000, audit_every: int = 10, prune_after: int = 100,
                     screening: bool = True, polish: bool = True, time_limit: float | None = None,
                     method: str = "DRO-Benders", x0=None) -> DroResult:
    """Exchange (cutting-plane) method for the robust program on finite supports.

    The main problem is an LP over flows, the threshold ``t``, one ``kappa``
    per block, one epigraph ``s_i`` per sample, shared hinge slacks ``u_j``
    per candidate, and epigraph variables for the link-potential features and
    the per-path entropy terms (outer-approximated by tangent cuts).  Its
    value is a valid lower bound; feasible completions give upper bounds.
    ``x0`` (path flows, e.g. from a neighbouring grid point) seeds extra
    tangent cuts and the incumbent.
    """
    if eps_sep <= 0 or eps_gap <= 0:
        raise DroError("tolerances must be positive")
    t_start = time.perf_counter()
    ev = RobustEvaluator(net, spec, profile)
    costs = ev.costs
    lam_bar, c = ev.lam_bar, ev.c
    theta = profile.theta
    blocks = spec.blocks
    Bn = len(blocks)
    sample_block = np.concatenate([np.full(b.samples.shape[0], k) for k, b in enumerate(blocks)])
    omega = np.concatenate([b.weights for b in blocks])
    sample_offsets = np.cumsum([0] + [b.samples.shape[0] for b in blocks])
    N, M, F, K = omega.size, costs.n_scenarios, costs.coef.shape[1], net.n_paths
    L = _Layout(K, Bn, N, M, F)
    A = net.incidence
    radii = np.array([b.radius for b in blocks])

    cvec = np.zeros(L.n)
    cvec[L.t] = lam_bar
    cvec[L.sigma] = 1.0
    cvec[L.e] = 1.0 / theta
    nonneg = np.ones(L.n, bool)
    nonneg[[L.t, L.sigma]] = False
    nonneg[L.s] = False
    E = np.zeros((len(net.od_pairs), L.n))
    for w, sl in enumerate(net.od_slices):
        E[w, np.arange(K)[sl]] = 1.0
    model = CutLP(cvec, nonneg, E, net.demands)
    permanent = set()

    # box on t from a bound on every potential
    x_cap = np.full(net.n_links, net.demands.sum())
    T = 10.0 * max(1.0, float(np.abs(costs.potentials(x_cap)).max()))
    row = np.zeros(L.n); row[L.t] = 1.0
    permanent.add(model.add_row(row, -T))
    row = np.zeros(L.n); row[L.t] = -1.0
    permanent.add(model.add_row(row, -T))

    # uniform starting flows; feature epigraphs are measured in units of their value there
    f0 = np.zeros(K)
    for w, sl in enumerate(net.od_slices):
        f0[sl] = net.demands[w] / (sl.stop - sl.start)
    x_start = A @ f0
    fscale = np.maximum(1.0, _feature_value(np.maximum(x_start[costs.feat_link], 1.0), costs.feat_power))
    feat_rows = [(costs.lin[j] @ A, costs.coef[j] * fscale) for j in range(M)]
    u_row_of: dict[int, int] = {}
    cut_pairs: dict[tuple, int] = {}
    sigma_cuts: set = set()

    def potential_coeffs(j):
        rowj = np.zeros(L.n)
        rowj[L.f] = feat_rows[j][0]
        rowj[L.w] = feat_rows[j][1]
        return rowj

    def ensure_u(j):
        if j in u_row_of:
            return
        rowj = -potential_coeffs(j)
        rowj[L.u.start + j] = 1.0
        rowj[L.t] = 1.0
        rid = model.add_row(rowj, 0.0)
        u_row_of[j] = rid
        permanent.add(rid)

    def add_exchange(i, j):
        b = sample_block[i]
        key = (i, j)
        if key in cut_pairs and cut_pairs[key] in model.rows:
            return False
        ensure_u(j)
        jl = j - ev.slices[b].start
        rowj = -(1.0 - lam_bar) * potential_coeffs(j)
        rowj[L.s.start + i] = 1.0
        if c > 0:
            rowj[L.u.start + j] = -c
        rowj[L.kappa.start + b] = ev.D[b][i - sample_offsets[b], jl]
        cut_pairs[key] = model.add_row(rowj, 0.0)
        return True

    def add_sigma(p):
        key = tuple(np.round(p, 15))
        if key in sigma_cuts:
            return False
        sigma_cuts.add(key)
        rowj = np.zeros(L.n)
        rowj[L.sigma] = 1.0
        rowj[L.kappa] = -p * radii
        rowj[L.s] = -p[sample_block] * omega
        permanent.add(model.add_row(rowj, 0.0))
        return True

    def add_feature_cut(r, xr):
        p = costs.feat_power[r]
        a = costs.feat_link[r]
        val = _feature_value(xr, p) / fscale[r]
        slope = xr ** (p - 1.0) / fscale[r]
        rowj = np.zeros(L.n)
        rowj[L.w.start + r] = 1.0
        rowj[L.f] = -slope * A[a]
        return model.add_row(rowj, val - slope * xr)

    def add_entropy_cut(k, fk):
        slope = np.log1p(fk)
        rowj = np.zeros(L.n)
        rowj[L.e.start + k] = 1.0
        rowj[L.f.start + k] = -slope
        return model.add_row(rowj, _psi(fk) - slope * fk)

    # initial model
    add_sigma(spec.frequencies)
    for r in range(F):
        add_feature_cut(r, x_start[costs.feat_link[r]])
        add_feature_cut(r, 0.0)
    for k in range(K):
        add_entropy_cut(k, f0[k])
    if x0 is not None:
        f0 = np.maximum(np.asarray(x0, float), 0.0)
        xw = A @ f0
        for r in range(F):
            add_feature_cut(r, xw[costs.feat_link[r]])
        for k in range(K):
            add_entropy_cut(k, f0[k])
    for b, (blk, D) in enumerate(zip(blocks, ev.D)):
        for il in range(D.shape[0]):
            add_exchange(sample_offsets[b] + il, ev.slices[b].start + int(np.argmin(D[il])))

    lb, ub = -np.inf, np.inf
    incumbent = f0.copy()
    trace = []
    inactive: dict[int, int] = {}
    skipped_total = 0
    prev = None  # (z, t, kappa, s, delta) of the last full separation
    converged = False
    force_full = False
    it = 0
    for it in range(1, max_iter + 1):
        sol = model.solve()
        if sol.status != "optimal":
            raise DroError(f"main problem {sol.status}; check the radius and support configuration")
        lb = max(lb, sol.value)
        X = sol.X
        f = np.maximum(X[L.f], 0.0)
        for w, sl in enumerate(net.od_slices):
            tot = f[sl].sum()
            if tot > 0:
                f[sl] *= net.demands[w] / tot
        t, kap, s = X[L.t], X[L.kappa], X[L.s]
        x = A @ f
        z = costs.potentials(x)
        g = HingePayoff(lam_bar, alpha=profile.alpha, t=t)(z)
        full = force_full or not screening or prev is None or it % audit_every == 0
        delta = np.empty(N)
        arg = np.zeros(N, dtype=int)
        skipped = 0
        if not full:
            dz = float(np.abs(z - prev[0]).max())
            dt = abs(t - prev[1])
        for b in range(Bn):
            sl = ev.slices[b]
            rows = slice(sample_offsets[b], sample_offsets[b + 1])
            vals = g[sl][None, :] - kap[b] * ev.D[b]
            best = vals.max(axis=1)
            delta[rows] = best - s[rows]
            arg[rows] = sl.start + vals.argmax(axis=1)
            if not full:
                # Lipschitz bound on the change since the last full separation
                bound = prev[4][rows] + (1.0 - lam_bar + c) * dz + c * dt + \
                    ev.D[b].max(axis=1) * abs(kap[b] - prev[2][b]) + np.abs(s[rows] - prev[3][rows])
                skip = bound <= eps_sep * (1.0 + abs(ub if np.isfinite(ub) else 0.0))
                skipped += int(skip.sum())
                delta[rows] = np.where(skip, np.minimum(delta[rows], bound), delta[rows])
                arg[rows] = np.where(skip, -1, arg[rows])
        skipped_total += skipped
        if full:
            prev = (z.copy(), t, kap.copy(), s.copy(), delta.copy())
        # upper bound from the exact per-block worst case at this threshold
        cases = [_block_worst_case(g[sl], D, blk.weights, blk.radius)
                 for blk, sl, D in zip(blocks, ev.slices, ev.D)]
        vals_b = np.array([cs.value for cs in cases])
        p_ub = worst_frequencies(spec.frequencies, vals_b, spec.epsilon_p)
        ub_it = lam_bar * t + float(p_ub @ vals_b) + entropy_term(f) / theta
        if ub_it < ub:
            ub, incumbent = ub_it, f.copy()
        gap = ub - lb
        tol_sep = eps_sep * (1.0 + abs(ub))
        trace.append({"iter": it, "lb": lb, "ub": ub, "gap": gap, "cuts": len(model.rows),
                      "seps_skipped": skipped, "time_ms": 1000.0 * (time.perf_counter() - t_start)})
        if gap <= eps_gap * (1.0 + abs(ub)):
            if full:
                converged = True
                break
            force_full = True
            continue
        force_full = False
        added = 0
        for i in np.nonzero(delta > tol_sep)[0]:
            if arg[i] >= 0:
                added += add_exchange(int(i), int(arg[i]))
        vb = kap * radii + np.bincount(sample_block, weights=omega * s, minlength=Bn)
        pv = worst_frequencies(spec.frequencies, vb, spec.epsilon_p)
        if float(pv @ vb) - X[L.sigma] > tol_sep:
            added += add_sigma(pv)
        xf = x[costs.feat_link]
        wv = X[L.w] * fscale
        fv = _feature_value(xf, costs.feat_power)
        for r in np.nonzero(fv - wv > 1e-12 * (1.0 + fv))[0]:
            add_feature_cut(int(r), float(xf[r]))
            added += 1
        ev_e = X[L.e]
        pv_e = _psi(f)
        for k in np.nonzero(pv_e - ev_e > 1e-12 * (1.0 + pv_e))[0]:
            add_entropy_cut(int(k), float(f[k]))
            added += 1
        # prune persistently inactive cuts
        act = model.row_activity(X)
        for rid, slack in act.items():
            if rid in permanent:
                continue
            if sol.row_duals.get(rid, 0.0) <= 0.0 and slack > 1e-9 * (1.0 + abs(ub)):
                inactive[rid] = inactive.get(rid, 0) + 1
            else:
                inactive[rid] = 0
        stale = [rid for rid, n in inactive.items() if n >= prune_after]
        if stale:
            model.remove_rows(stale)
            for rid in stale:
                inactive.pop(rid, None)
        if added == 0:
            force_full = True
            if full:
                # no violated cut left while the gap is open: numerical floor of the LP
                break
        if time_limit is not None and time.perf_counter() - t_start > time_limit:
            break

    rv = ev.evaluate(incumbent)
    f_best, rv_best = incumbent, rv
    if polish:
        f_cur, rv_cur = incumbent, rv
        for _ in range(5):
            sub = solve_approach_B(net, None, profile, "B2", x0=f_cur, costs=costs, probs=rv_cur.marginal)
            rv_new = ev.evaluate(sub.path_flows)
            if rv_new.value < rv_best.value - 1e-15 * abs(rv_best.value):
                f_best, rv_best = sub.path_flows, rv_new
            if rv_new.value >= rv_cur.value - 1e-13 * abs(rv_cur.value):
                break
            f_cur, rv_cur = sub.path_flows, rv_new
    ub = min(ub, rv_best.value)
    sol = robust_flow_solution(method, net, ev, f_best, rv_best,
                               {"lower_bound": lb, "upper_bound": ub, "iterations": it})
    gap = ub - lb
    return DroResult(sol, lb, ub, gap, converged or gap <= eps_gap * (1.0 + abs(ub)), it, trace, rv_best.t,
                     rv_best.kappas, rv_best.frequencies, rv_best.marginal, skipped_total, len(model.rows))


def robust_flow_solution(method, net, ev: RobustEvaluator, f, rv: RobustValue, diag=None) -> FlowSolution:
    f = np.where(f < 1e-12, 0.0, np.asarray(f, float))
    q = rv.marginal
    pr = ev.profile
    chi = _tail(rv.potentials, q, pr.alpha).weights
    g, mu = generalized_costs(f, net, ev.costs, q, pr, tail_weights=chi)
    z = rv.potentials
    mean = float(q @ z)
    cvar = _tail(z, q, pr.alpha).cvar
    ent = entropy_term(f) / pr.theta
    d = {"t": rv.t, "kappas": rv.kappas.tolist(), "frequencies": rv.frequencies.tolist()}
    d.update(diag or {})
    return FlowSolution(method, f, net.incidence @ f, g, f / net.demands[net.path_od], mu, rv.value, mean, cvar,
                        ent, True, int(d.get("iterations", 0)), chi, d)


# ---------------------------------------------------------------------------
# affine dependence on the uncertain coordinates

class AffineModel:
    """``Z(f, xi) = z0(f) + h(f) . xi`` with analytic Jacobians in ``f``."""

    def value(self, f, xi) -> float:
        z0, h = self.decompose(f)
        return float(z0 + h @ np.asarray(xi, float))

    def decompose(self, f):
        raise NotImplementedError

    def jacobians(self, f):
        raise NotImplementedError


class LinearCoefficientModel(AffineModel):
    """Linear link costs whose coefficients ``(a_1, b_1, a_2, b_2, ...)`` are uncertain.

    ``uncertain`` selects which coefficients form ``xi``; the others are fixed
    at ``base``.
    """

    def __init__(self, net: NetworkInstance, base=None, uncertain=None):
        self.net = net
        n = 2 * net.n_links
        self.base = np.zeros(n) if base is None else np.asarray(base, float)
        self.uncertain = np.arange(n) if uncertain is None else np.asarray(uncertain, int)
        self.fixed = np.setdiff1d(np.arange(n), self.uncertain)

    def _features(self, f):
        x = self.net.incidence @ np.maximum(f, 0.0)
        phi = np.empty(2 * x.size)
        phi[0::2] = x
        phi[1::2] = 0.5 * x * x
        dphi = np.empty((2 * x.size, self.net.n_paths))
        dphi[0::2] = self.net.incidence
        dphi[1::2] = x[:, None] * self.net.incidence
        return phi, dphi

    def decompose(self, f):
        phi, _ = self._features(f)
        return float(self.base[self.fixed] @ phi[self.fixed]), phi[self.uncertain]

    def jacobians(self, f):
        phi, dphi = self._features(f)
        return self.base[self.fixed] @ dphi[self.fixed], dphi[self.uncertain]

    def full_coefficients(self, xi) -> np.ndarray:
        c = self.base.copy()
        c[self.uncertain] = xi
        return c


class ScenarioPotentialModel:
    """Potential as a generic function of coordinates, via a parameter map."""

    def __init__(self, net: NetworkInstance, params_from_xi):
        self.net, self.params_from_xi = net, params_from_xi

    def value(self, f, xi) -> float:
        costs = compile_costs([self.params_from_xi(np.asarray(xi, float))], self.net.n_links)
        return float(costs.potentials(self.net.incidence @ np.maximum(f, 0.0))[0])


def check_affine(model, net: NetworkInstance, dim: int, seed: int = 0, tol: float = 1e-9) -> bool:
    """Collinearity probe: ``Z`` along a random line must interpolate linearly."""
    rng = np.random.default_rng(seed)
    f = np.zeros(net.n_paths)
    for w, sl in enumerate(net.od_slices):
        f[sl] = net.demands[w] * rng.dirichlet(np.ones(sl.stop - sl.start))
    xa, xb = rng.uniform(0.5, 2.0, size=(2, dim))
    s = rng.uniform(0.2, 0.8)
    za, zb = model.value(f, xa), model.value(f, xb)
    zc = model.value(f, xa + s * (xb - xa))
    return abs(zc - ((1.0 - s) * za + s * zb)) <= tol * (1.0 + abs(za) + abs(zb))


def solve_dro_affine(net: NetworkInstance, model, samples, rho: float, profile: RiskProfile, weights=None,
                     x0=None, gtol: float = 1e-12, ftol: float = 1e-15) -> FlowSolution:
    """Robust equilibrium when the potential is affine in ``xi`` on an unbounded support.

    For fixed flows the inner problem has the closed form
    ``(1 - w) E[Z] + w CVaR[Z] + rho * (1 - w + w/(1-alpha)) * ||h(f)||``
    under the empirical law, which is minimized by the first-order engine.
    """
    samples = np.atleast_2d(np.asarray(samples, float))
    if not isinstance(model, AffineModel) or not check_affine(model, net, samples.shape[1]):
        raise DroError("potential is not affine in the uncertain coordinates")
    if rho < 0:
        raise DroError("radius must be nonnegative")
    n = samples.shape[0]
    weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float)
    lam_bar = profile.lam_bar
    slope = 1.0 - lam_bar + lam_bar / (1.0 - profile.alpha)

    # the sample coefficient vectors become ordinary linear scenarios
    full = np.array([model.full_coefficients(xi) for xi in samples]) if hasattr(model, "full_coefficients") \
        else None
    if full is None:
        raise DroError("model must expose full_coefficients for the scenario reduction")
    scen = linear_scenarios(full, weights)

    def penalty(f):
        _, h = model.decompose(f)
        nh = float(np.linalg.norm(h))
        if nh == 0.0 or rho == 0.0:
            return 0.0, np.zeros(net.n_paths)
        _, J = model.jacobians(f)
        return rho * slope * nh, rho * slope * (h @ J) / nh

    sol = solve_approach_B(net, scen, profile, "B2", x0=x0, gtol=gtol, ftol=ftol, extra=penalty)
    pen = penalty(sol.path_flows)[0]
    d = dict(sol.diagnostics)
    d.update({"kappa": slope * float(np.linalg.norm(model.decompose(sol.path_flows)[1])), "penalty": pen})
    return FlowSolution("DRO-affine", sol.path_flows, sol.link_flows, sol.costs, sol.probabilities, sol.mu,
                        sol.objective, sol.mean_part, sol.cvar_part, sol.entropy_part, sol.converged,
                        sol.iterations, sol.tail_weights, d)


# ---------------------------------------------------------------------------
# regime-structured variants

def solve_regime_scenario_A(net: NetworkInstance, spec: AmbiguitySpec, profile: RiskProfile, **kw) -> DroResult:
    """One flow vector and one threshold against the mixture over regimes."""
    return benders_exchange(net, spec.with_frequencies(spec.frequencies, 0.0), profile,
                            method="DRO-scenario-A", **kw)


@dataclass
class ScenarioBResult:
    per_regime: dict
    frequencies: np.ndarray
    objective: float
    failures: dict


def solve_regime_scenario_B(net: NetworkInstance, spec: AmbiguitySpec, profile: RiskProfile, threads: int = 1,
                            **kw) -> ScenarioBResult:
    """Independent robust equilibria per regime, weighted by regime frequencies."""
    from concurrent.futures import ThreadPoolExecutor

    def run(b):
        return benders_exchange(net, spec.single_block(b), profile, method=f"DRO-scenario-B:{spec.blocks[b].label}",
                                **kw)

    idx = range(len(spec.blocks))
    results, failures = {}, {}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {b: pool.submit(run, b) for b in idx}
            outcomes = {}
            for b in idx:
                try:
                    outcomes[b] = futures[b].result()
                except Exception as exc:  # isolate per-regime failures
                    outcomes[b] = exc
    else:
        outcomes = {}
        for b in idx:
            try:
                outcomes[b] = run(b)
            except Exception as exc:
                outcomes[b] = exc
    total = 0.0
    for b in idx:
        label = spec.blocks[b].label
        out = outcomes[b]
        if isinstance(out, Exception):
            failures[label] = str(out)
            total = np.nan
        else:
            results[label] = out
            total += spec.frequencies[b] * out.upper_bound
    return ScenarioBResult(results, spec.frequencies.copy(), float(total), failures)


def regime_weighted_value(net, spec: AmbiguitySpec, profile: RiskProfile, flows: dict) -> float:
    """Weighted regime objective for given per-regime flows, evaluated in one pass."""
    total = 0.0
    for b, blk in enumerate(spec.blocks):
        total += spec.frequencies[b] * RobustEvaluator(net, spec.single_block(b), profile).evaluate(
            flows[blk.label]).value
    return total


def solve_joint_frequency_robust(net: NetworkInstance, spec: AmbiguitySpec, epsilon_p: float,
                                 profile: RiskProfile, **kw) -> DroResult:
    """Regime frequencies move in an l1 ball on top of the per-regime balls.

    Each exchange iteration solves the outer frequency LP for the current
    regime values (a greedy mass shift) and adds that frequency vertex as a
    cut, so outer and inner layers are alternated inside one cutting-plane
    loop whose bounds certify the combined objective.
    """
    if epsilon_p < 0:
        raise DroError("frequency budget must be nonnegative")
    return benders_exchange(net, spec.with_frequencies(spec.frequencies, epsilon_p), profile,
                            method="DRO-joint", **kw)
