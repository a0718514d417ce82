"""Truncated-logit equilibria: path-based fixed points and potential-based programs."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import FeasibleRegion, minimize_convex
from .network import InfeasibleODError, NetworkInstance, aggregate_link_flows
from .risk import RiskProfile, _tail
from .scenarios import CostTable, ScenarioSet, beckmann_potential, marginal_path_times

POSITIVE_FLOW = 1e-6

METHODS = ("RiskNeutral", "CVaROnly", "MeanCVaRMixture", "ApproachA", "ApproachB1", "ApproachB2")
_PATH_MODES = {"RiskNeutral": "expectation", "CVaROnly": "cvar_only", "MeanCVaRMixture": "mixture",
               "ApproachA": "normalized"}


@dataclass(frozen=True)
class FlowSolution:
    method: str
    path_flows: np.ndarray
    link_flows: np.ndarray
    costs: np.ndarray
    probabilities: np.ndarray
    mu: np.ndarray
    objective: float
    mean_part: float
    cvar_part: float
    entropy_part: float
    converged: bool
    iterations: int
    tail_weights: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TsueConfig:
    method: str
    profile: RiskProfile
    msa_max_iter: int = 5000
    msa_tol: float = 1e-6
    step_rule: str = "harmonic"
    freeze_after: int = 100
    gtol: float = 1e-12
    ftol: float = 1e-15
    max_iter: int = 200_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.msa_tol <= 0 or self.gtol <= 0 or self.ftol <= 0:
            raise ValueError("tolerances must be positive")
        if self.step_rule not in ("harmonic", "sra"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


# ---------------------------------------------------------------------------
# entropy and the logit kernel

def entropy_term(f) -> float:
    f = np.asarray(f, dtype=float)
    if np.any(f < -1e-9):
        raise ValueError("negative path flow")
    f = np.maximum(f, 0.0)
    return float(np.sum((f + 1.0) * np.log1p(f) - f))


def entropy_gradient(f) -> np.ndarray:
    return np.log1p(np.maximum(np.asarray(f, float), 0.0))


@dataclass(frozen=True)
class LogitLoad:
    flows: np.ndarray
    probabilities: np.ndarray
    admissible: np.ndarray


def truncated_logit_load(phi, budget: float, theta: float, demand: float, od=None) -> LogitLoad:
    """Load ``demand`` with weights ``max(exp(-theta (phi - budget)) - 1, 0)``."""
    if theta <= 0 or demand <= 0:
        raise ValueError("theta and demand must be positive")
    phi = np.asarray(phi, dtype=float)
    z = theta * (budget - phi)
    admissible = z > 0
    if not admissible.any():
        o, d = od if od is not None else ("?", "?")
        raise InfeasibleODError(o, d, "every path cost reaches the budget")
    zmax = z[admissible].max()
    if zmax > 600.0:
        w = np.where(admissible, np.exp(z - zmax) - np.exp(-zmax), 0.0)
    else:
        w = np.where(admissible, np.expm1(np.minimum(z, 600.0)), 0.0)
    P = w / w.sum()
    return LogitLoad(demand * P, P, admissible)


# ---------------------------------------------------------------------------
# path-based risk perception

def _column_cvar(times: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    return np.array([_tail(times[:, k], probs, alpha).cvar for k in range(times.shape[1])])


def path_certainty_equivalents(f, net: NetworkInstance, scen: ScenarioSet, profile: RiskProfile,
                               mode: str = "normalized") -> np.ndarray:
    """Deterministic path costs handed to the logit kernel."""
    times = marginal_path_times(f, net, scen.costs)
    mean = scen.probs @ times
    if mode == "expectation":
        return mean
    if mode == "normalized" and profile.lam_bar == 0.0:
        return mean
    cvar = _column_cvar(times, scen.probs, profile.alpha)
    if mode == "cvar_only":
        return cvar
    if mode == "mixture":
        return (1.0 - profile.lam) * mean + profile.lam * cvar
    if mode == "normalized":
        return (1.0 - profile.lam_bar) * mean + profile.lam_bar * cvar
    raise ValueError(f"unknown mode {mode!r}")


def _budgets(net: NetworkInstance, profile: RiskProfile) -> np.ndarray:
    if len(profile.budgets) != len(net.od_pairs):
        raise ValueError("the path-based kernel needs one budget per OD pair")
    return np.asarray(profile.budgets, float)


def _load_all(net, phi, budgets, theta, masks=None):
    out = np.zeros(net.n_paths)
    adm = np.zeros(net.n_paths, bool)
    for w, sl in enumerate(net.od_slices):
        od = net.od_pairs[w]
        if od.demand == 0:
            continue
        ph = phi[sl] if masks is None else np.where(masks[sl], phi[sl], np.inf)
        load = truncated_logit_load(ph, budgets[w], theta, od.demand, (od.origin, od.destination))
        out[sl] = load.flows
        adm[sl] = load.admissible
    return out, adm


def _decomposition(f, net, costs: CostTable, probs, profile):
    z = beckmann_potential(f, net, costs)
    mean = float(probs @ z)
    cvar = _tail(z, probs, profile.alpha).cvar
    ent = entropy_term(f) / profile.theta
    obj = (1.0 - profile.lam_bar) * mean + profile.lam_bar * cvar + ent
    return obj, mean, cvar, ent


def solve_approach_A(net: NetworkInstance, scen: ScenarioSet, profile: RiskProfile, mode: str = "normalized",
                     max_iter: int = 5000, tol: float = 1e-6, step_rule: str = "harmonic",
                     freeze_after: int = 100, method: str = "ApproachA") -> FlowSolution:
    """Method of successive averages on the truncated-logit fixed point."""
    budgets = _budgets(net, profile)
    theta = profile.theta
    q = net.demands[net.path_od]
    phi0 = path_certainty_equivalents(np.zeros(net.n_paths), net, scen, profile, mode)
    f = np.zeros(net.n_paths)
    for w, sl in enumerate(net.od_slices):
        od = net.od_pairs[w]
        adm = phi0[sl] < budgets[w]
        if od.demand > 0 and not adm.any():
            raise InfeasibleODError(od.origin, od.destination, "no path is admissible at free flow")
        f[sl] = np.where(adm, od.demand / max(adm.sum(), 1), 0.0)

    seen_sets: dict[bytes, int] = {}
    masks = None
    frozen_at = None
    cycled = False
    beta_n, last_res = 1.0, np.inf
    change = residual = np.inf
    n = 0
    for n in range(max_iter):
        phi = path_certainty_equivalents(f, net, scen, profile, mode)
        aux, adm = _load_all(net, phi, budgets, theta, masks)
        if masks is None:
            key = adm.tobytes()
            if key in seen_sets and seen_sets[key] < n - 1:
                cycled = True
            seen_sets[key] = n
            if cycled and n >= freeze_after:
                masks, frozen_at = adm.copy(), n
        diff = aux - f
        residual = float(np.max(np.abs(diff) / np.maximum(q, 1e-300)))
        if step_rule == "harmonic":
            step = 1.0 / (n + 1)
        else:
            # self-regulated averaging: slow down faster when the residual grows
            if n > 0:
                beta_n += 1.9 if residual >= last_res else 0.1
            step = 1.0 / beta_n
            last_res = residual
        f = f + step * diff
        change = float(np.max(np.abs(step * diff) / np.maximum(q, 1e-300)))
        if change <= tol and n > 0:
            break
    converged = change <= tol
    phi = path_certainty_equivalents(f, net, scen, profile, mode)
    obj, mean, cvar, ent = _decomposition(f, net, scen.costs, scen.probs, profile)
    diag = {"mode": mode, "step_rule": step_rule, "residual": residual, "max_change": change,
            "admissible_cycled": cycled, "frozen_at": frozen_at}
    return FlowSolution(method, f, aggregate_link_flows(net, f), phi, f / q, budgets.copy(), obj, mean,
                        cvar, ent, converged, n + 1, None, diag)


# ---------------------------------------------------------------------------
# potential-based programs

def _region(net):
    return FeasibleRegion.for_network(net)


class _RiskObjective:
    """``(1 - w) E[Z] + w CVaR(Z) + extra`` with ``Z`` the scenario potentials."""

    def __init__(self, net, costs, probs, lam_bar, alpha, theta, variant="B2", extra=None, fixed_weights=None):
        self.net, self.costs, self.probs = net, costs, np.asarray(probs, float)
        self.lam_bar, self.alpha, self.theta = lam_bar, alpha, theta
        self.variant, self.extra = variant, extra
        self.fixed_weights = fixed_weights

    def pieces(self, f):
        f = np.maximum(f, 0.0)
        x = self.net.incidence @ f
        z = self.costs.potentials(x)
        ent = entropy_term(f) / self.theta
        return x, z, ent

    def weights(self, values):
        if self.fixed_weights is not None:
            return self.fixed_weights
        if self.lam_bar == 0.0:
            return self.probs
        chi = _tail(values, self.probs, self.alpha).weights
        return (1.0 - self.lam_bar) * self.probs + self.lam_bar / (1.0 - self.alpha) * self.probs * chi

    def __call__(self, f):
        x, z, ent = self.pieces(f)
        if self.variant == "B1":
            values = z + ent
            pw = self.weights(values)
            val = float(pw @ values)
        else:
            pw = self.weights(z)
            val = float(pw @ z) + ent
        tau = self.costs.times(x) @ self.net.incidence
        grad = pw @ tau + entropy_gradient(f) / self.theta * (pw.sum() if self.variant == "B1" else 1.0)
        if self.extra is not None:
            ev, eg = self.extra(f)
            val += ev
            grad = grad + eg
        return val, grad


def _tie_group(z, probs, alpha, rel_tol=1e-7):
    tail = _tail(z, probs, alpha)
    zm = z[tail.index]
    close = np.nonzero(np.abs(z - zm) <= rel_tol * (1.0 + abs(zm)))[0]
    return tail, close


def _polish_ties(obj: _RiskObjective, f, region, gtol, ftol, max_iter):
    """Resolve a two-scenario tie at the VaR atom by bisection on the split weight.

    Returns ``(f, tail_weights, info)``; ``tail_weights`` is None when no
    polish was needed.
    """
    _, z, ent = obj.pieces(f)
    values = z + ent if obj.variant == "B1" else z
    tail, group = _tie_group(values, obj.probs, obj.alpha)
    if obj.lam_bar == 0.0 or group.size < 2:
        return f, None, "none"
    if group.size > 2:
        return f, None, f"unresolved tie among {group.size} scenarios"
    p = obj.probs
    zm = values[tail.index]
    above = values > zm + 1e-7 * (1.0 + abs(zm))
    above[group] = False
    budget = (1.0 - obj.alpha) - p[above].sum()
    a, b = group
    lo, hi = max(0.0, budget - p[b]), min(p[a], budget)
    if hi - lo <= 1e-15:
        return f, None, "none"
    base_chi = np.where(above, 1.0, 0.0)

    def solve_at(u):
        chi = base_chi.copy()
        chi[a] = u / p[a] if p[a] > 0 else 0.0
        chi[b] = (budget - u) / p[b] if p[b] > 0 else 0.0
        pw = (1.0 - obj.lam_bar) * p + obj.lam_bar / (1.0 - obj.alpha) * p * chi
        sub = _RiskObjective(obj.net, obj.costs, p, obj.lam_bar, obj.alpha, obj.theta, obj.variant,
                             obj.extra, fixed_weights=pw)
        res = minimize_convex(sub, region, solve_at.x, gtol=gtol, ftol=ftol, max_iter=max_iter)
        solve_at.x = res.x
        _, zz, ee = sub.pieces(res.x)
        vv = zz + ee if obj.variant == "B1" else zz
        return res.x, vv[a] - vv[b], chi

    solve_at.x = f
    f_lo, r_lo, chi_lo = solve_at(lo)
    if r_lo <= 0:
        return f_lo, chi_lo, "tie at lower split"
    f_hi, r_hi, chi_hi = solve_at(hi)
    if r_hi >= 0:
        return f_hi, chi_hi, "tie at upper split"
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f_mid, r_mid, chi_mid = solve_at(mid)
        if abs(r_mid) <= 1e-12 * (1.0 + abs(zm)) or hi - lo <= 1e-14:
            break
        if r_mid > 0:
            lo = mid
        else:
            hi = mid
    return f_mid, chi_mid, "tie resolved"


def _finish_potential_solution(method, net, costs, probs, profile, f, chi, converged, iterations, diag,
                               objective=None):
    f = np.where(f < 1e-12, 0.0, f)
    g, mu = generalized_costs(f, net, costs, probs, profile, tail_weights=chi)
    z = beckmann_potential(f, net, costs)
    mean = float(probs @ z)
    cvar = _tail(z, probs, profile.alpha).cvar
    ent = entropy_term(f) / profile.theta
    obj = (1.0 - profile.lam_bar) * mean + profile.lam_bar * cvar + ent if objective is None else objective
    q = net.demands[net.path_od]
    return FlowSolution(method, f, aggregate_link_flows(net, f), g, f / q, mu, obj, mean, cvar, ent,
                        converged, iterations, chi, diag)


def solve_approach_B(net: NetworkInstance, scen: ScenarioSet, profile: RiskProfile, variant: str = "B2",
                     x0=None, gtol: float = 1e-12, ftol: float = 1e-15, max_iter: int = 200_000,
                     costs: CostTable | None = None, probs=None, extra=None) -> FlowSolution:
    """Minimize the normalized mean-CVaR potential plus the entropy term.

    ``variant="B1"`` places the entropy inside each scenario potential before
    the risk functional is applied; ``"B2"`` keeps it outside.  ``costs`` and
    ``probs`` override the scenario set (used for reweighted supports), and
    ``extra(f) -> (value, grad)`` adds a smooth convex term.
    """
    if variant not in ("B1", "B2"):
        raise ValueError("variant must be B1 or B2")
    costs = scen.costs if costs is None else costs
    probs = scen.probs if probs is None else np.asarray(probs, float)
    region = _region(net)
    obj = _RiskObjective(net, costs, probs, profile.lam_bar, profile.alpha, profile.theta, variant, extra)
    res = minimize_convex(obj, region, x0, gtol=gtol, ftol=ftol, max_iter=max_iter)
    f, chi, tie = _polish_ties(obj, res.x, region, gtol, ftol, max_iter)
    diag = {"message": res.message, "pg_norm": res.pg_norm, "tie": tie, "variant": variant}
    if chi is not None:
        chi_out = chi
    else:
        _, z, ent = obj.pieces(f)
        chi_out = _tail(z + ent if variant == "B1" else z, probs, profile.alpha).weights
    value = obj(f)[0]
    sol = _finish_potential_solution("Approach" + variant, net, costs, probs, profile, f, chi_out,
                                     res.converged, res.iterations, diag, objective=value)
    return sol


def generalized_costs(f, net: NetworkInstance, costs, probs=None, profile: RiskProfile = None,
                      tail_weights=None):
    """Risk-adjusted marginal path costs and the OD multipliers.

    ``costs`` may be a ``ScenarioSet`` (then ``probs`` defaults to its
    probabilities) or a compiled ``CostTable``.  Tail weights default to the
    canonical ones of the scenario potential distribution at ``f``.
    """
    if isinstance(costs, ScenarioSet):
        probs = costs.probs if probs is None else probs
        costs = costs.costs
    probs = np.asarray(probs, float)
    f = np.maximum(np.asarray(f, float), 0.0)
    tau = marginal_path_times(f, net, costs)
    if profile.lam_bar == 0.0:
        pw = probs
    else:
        chi = tail_weights
        if chi is None:
            chi = _tail(beckmann_potential(f, net, costs), probs, profile.alpha).weights
        pw = (1.0 - profile.lam_bar) * probs + profile.tail_scale * probs * np.asarray(chi, float)
    g = pw @ tau
    stat = g + entropy_gradient(f) / profile.theta
    mu = np.zeros(len(net.od_pairs))
    for w, sl in enumerate(net.od_slices):
        pos = f[sl] > POSITIVE_FLOW
        mu[w] = stat[sl][pos].mean() if pos.any() else g[sl].min()
    return g, mu


def reconstruct_flows(g, mu, net: NetworkInstance, theta: float) -> np.ndarray:
    return np.maximum(np.expm1(theta * (mu[net.path_od] - g)), 0.0)


def stationarity_residuals(sol: FlowSolution, net: NetworkInstance, theta: float):
    """Residuals of the truncated-logit optimality conditions (positive, zero paths)."""
    f = sol.path_flows
    stat = sol.costs + entropy_gradient(f) / theta - sol.mu[net.path_od]
    pos = f > POSITIVE_FLOW
    r_pos = float(np.max(np.abs(stat[pos]), initial=0.0))
    r_zero = float(np.max(sol.mu[net.path_od][~pos] - sol.costs[~pos], initial=0.0))
    return r_pos, r_zero


# ---------------------------------------------------------------------------
# regime dominance

@dataclass(frozen=True)
class DominanceReport:
    ordered: bool
    order: tuple
    violation: tuple | None = None


def check_regime_dominance(scen: ScenarioSet, net: NetworkInstance, n_grid: int = 50,
                           tol: float = 1e-12) -> DominanceReport:
    """Look for a scenario ordering that worsens every link time at every flow level."""
    costs = scen.costs
    cap = np.full(net.n_links, 2.0 * max(net.demands.sum(), 1.0))
    for a in range(net.n_links):
        caps = [p[a]["capacity"] for p in scen.params if "capacity" in p[a]]
        if caps:
            cap[a] = 2.0 * max(caps)
    grid = np.linspace(0.0, 1.0, n_grid)[:, None] * cap[None, :]
    times = np.stack([costs.times(x) for x in grid])  # (G, S, A)
    order = tuple(int(i) for i in np.lexsort((np.arange(costs.n_scenarios), times.sum(axis=(0, 2)))))
    for i in range(len(order) - 1):
        s, s2 = order[i], order[i + 1]
        bad = times[:, s, :] > times[:, s2, :] + tol * (1.0 + np.abs(times[:, s2, :]))
        if bad.any():
            gi, a = np.argwhere(bad)[0]
            return DominanceReport(False, order, (net.links[a].id, float(grid[gi, a]), s, s2))
    return DominanceReport(True, order, None)


# ---------------------------------------------------------------------------
# dispatcher

def solve_tsue(net: NetworkInstance, scen: ScenarioSet, cfg: TsueConfig, x0=None) -> FlowSolution:
    if cfg.method in _PATH_MODES:
        return solve_approach_A(net, scen, cfg.profile, _PATH_MODES[cfg.method], cfg.msa_max_iter, cfg.msa_tol,
                                cfg.step_rule, cfg.freeze_after, method=cfg.method)
    variant = "B1" if cfg.method == "ApproachB1" else "B2"
    return solve_approach_B(net, scen, cfg.profile, variant, x0, cfg.gtol, cfg.ftol, cfg.max_iter)


def calibrated_profile(profile: RiskProfile, mu) -> RiskProfile:
    """Copy of ``profile`` whose budgets equal the given OD multipliers."""
    return replace(profile, budgets=tuple(float(m) for m in mu))
