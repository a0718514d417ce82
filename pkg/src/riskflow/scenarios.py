"""Scenario-dependent link costs, Beckmann potentials and scenario generators.

Every scenario cost is stored in one compiled form: the link travel time is
``lin + sum_r coef_r * x**(power_r - 1)`` over the power features attached to
the link, so its flow integral is ``lin * x + sum_r coef_r * x**power_r / power_r``.
A BPR link ``t0 (1 + a (x/c)**b) + delay`` maps to ``lin = t0 + delay`` and a
single feature of power ``b + 1`` with ``coef = t0 a / c**b``; a linear link
``a + b x`` maps to ``lin = a`` and a quadratic feature with ``coef = b``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkInstance, aggregate_link_flows

GRAVITY = 9.81
DESIGN_SPEED_MS = 13.4112  # 30 mph
MPH_TO_MS = 0.44704
SEVERITY_LABELS = ("Critical", "Severe", "Significant", "Moderate", "Minor")


class ScenarioError(ValueError):
    pass


def _bpr_time(t0, alpha, beta, capacity, delay, x):
    return t0 * (1.0 + alpha * (x / capacity) ** beta) + delay


def link_time(params: dict, x: float) -> float:
    """Travel time (minutes) of one link under one scenario's parameters."""
    if x < 0:
        raise ScenarioError("negative link flow")
    if "intercept" in params:
        return params["intercept"] + params["slope"] * x
    return _bpr_time(params["t0"], params.get("alpha", 0.15), params.get("beta", 4.0),
                     params["capacity"], params.get("delay", 0.0), x)


def link_integral(params: dict, x: float) -> float:
    if x < 0:
        raise ScenarioError("negative link flow")
    if "intercept" in params:
        return params["intercept"] * x + 0.5 * params["slope"] * x * x
    t0, a, b = params["t0"], params.get("alpha", 0.15), params.get("beta", 4.0)
    c, delay = params["capacity"], params.get("delay", 0.0)
    return t0 * x + t0 * a * x ** (b + 1) / ((b + 1) * c ** b) + delay * x


def _validate_params(p: dict, where: str):
    if "intercept" in p:
        if p["slope"] < 0:
            raise ScenarioError(f"{where}: negative slope")
        return
    if p.get("beta", 4.0) < 1:
        raise ScenarioError(f"{where}: BPR exponent below 1 breaks convexity")
    if p["capacity"] <= 0:
        raise ScenarioError(f"{where}: capacity must be positive")
    if p.get("delay", 0.0) < 0:
        raise ScenarioError(f"{where}: negative incident delay")


@dataclass(frozen=True)
class CostTable:
    """Compiled per-scenario link costs (rows are scenarios)."""

    lin: np.ndarray  # (S, A)
    coef: np.ndarray  # (S, F)
    feat_link: np.ndarray  # (F,)
    feat_power: np.ndarray  # (F,)

    @property
    def n_scenarios(self) -> int:
        return self.lin.shape[0]

    def times(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        t = self.lin.copy()
        xf = x[self.feat_link]
        np.add.at(t.T, self.feat_link, (self.coef * xf ** (self.feat_power - 1.0)).T)
        return t

    def slopes(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        d = np.zeros_like(self.lin)
        xf = x[self.feat_link]
        p = self.feat_power
        vals = self.coef * (p - 1.0) * xf ** (p - 2.0)  # 0**0 == 1 for quadratic features
        np.add.at(d.T, self.feat_link, vals.T)
        return d

    def features(self, x) -> np.ndarray:
        xf = np.asarray(x, float)[self.feat_link]
        return xf ** self.feat_power / self.feat_power

    def potentials(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return self.lin @ x + self.coef @ self.features(x)

    def subset(self, idx) -> "CostTable":
        idx = np.atleast_1d(idx)
        return CostTable(self.lin[idx], self.coef[idx], self.feat_link, self.feat_power)


def compile_costs(per_scenario_params, n_links: int) -> CostTable:
    """Compile a list (scenarios) of lists (links) of parameter dicts."""
    S = len(per_scenario_params)
    if S == 0:
        raise ScenarioError("empty scenario list")
    lin = np.zeros((S, n_links))
    feats: dict[tuple[int, float], int] = {}
    entries = []
    for s, plist in enumerate(per_scenario_params):
        if len(plist) != n_links:
            raise ScenarioError(f"scenario {s}: expected {n_links} link parameter sets")
        for a, p in enumerate(plist):
            _validate_params(p, f"scenario {s}, link {a}")
            if "intercept" in p:
                lin[s, a] = p["intercept"]
                power, coef = 2.0, p["slope"]
            else:
                t0, al, be = p["t0"], p.get("alpha", 0.15), p.get("beta", 4.0)
                lin[s, a] = t0 + p.get("delay", 0.0)
                power, coef = be + 1.0, t0 * al / p["capacity"] ** be
            key = (a, float(power))
            if key not in feats:
                feats[key] = len(feats)
            entries.append((s, feats[key], coef))
    keys = sorted(feats, key=lambda k: feats[k])
    coef = np.zeros((S, len(keys)))
    for s, r, c in entries:
        coef[s, r] += c
    return CostTable(lin, coef, np.array([k[0] for k in keys], dtype=int),
                     np.array([k[1] for k in keys], dtype=float))


@dataclass(frozen=True)
class ScenarioSet:
    """Finite scenario library with probabilities, regime labels and coordinates."""

    labels: tuple[str, ...]
    probs: np.ndarray
    params: tuple  # per scenario, per link parameter dicts
    regimes: tuple = ()
    xi: np.ndarray | None = None
    costs: CostTable = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12 * max(1, len(p)) + 1e-12:
            raise ScenarioError("scenario probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)
        if len(self.labels) != len(p) or len(self.params) != len(p):
            raise ScenarioError("labels, probabilities and parameters must align")
        if self.regimes and len(self.regimes) != len(p):
            raise ScenarioError("one regime label per scenario")
        if self.xi is not None:
            object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        n_links = len(self.params[0])
        object.__setattr__(self, "costs", compile_costs(self.params, n_links))

    @property
    def n_scenarios(self) -> int:
        return len(self.labels)

    def subset(self, idx, renormalize=True) -> "ScenarioSet":
        idx = list(np.atleast_1d(idx))
        p = self.probs[idx]
        if renormalize:
            p = p / p.sum()
        return ScenarioSet(tuple(self.labels[i] for i in idx), p, tuple(self.params[i] for i in idx),
                           tuple(self.regimes[i] for i in idx) if self.regimes else (),
                           None if self.xi is None else self.xi[idx])

    def reweighted(self, probs) -> "ScenarioSet":
        return ScenarioSet(self.labels, np.asarray(probs, float), self.params, self.regimes, self.xi)


def beckmann_potential(f, net: NetworkInstance, costs: CostTable, s=None):
    """Scenario congestion potentials at path flows ``f`` (all scenarios, or one)."""
    x = aggregate_link_flows(net, f)
    if np.any(x < -1e-12):
        raise ScenarioError("negative link flow")
    z = costs.potentials(np.maximum(x, 0.0))
    return z if s is None else float(z[s])


def marginal_path_times(f, net: NetworkInstance, costs: CostTable) -> np.ndarray:
    """Scenario path times ``(S, K)``; row ``s`` is the gradient of the potential."""
    x = np.maximum(aggregate_link_flows(net, f), 0.0)
    return costs.times(x) @ net.incidence


# linear-coefficient parameterization ----------------------------------------

def linear_params_from_xi(xi) -> list[dict]:
    """Coordinates ``(a_1, b_1, a_2, b_2, ...)`` to per-link linear parameters."""
    xi = np.asarray(xi, float)
    if xi.size % 2:
        raise ScenarioError("linear coordinates come in (intercept, slope) pairs")
    return [{"intercept": float(xi[2 * i]), "slope": float(xi[2 * i + 1])} for i in range(xi.size // 2)]


def linear_scenarios(xi_rows, probs, labels=None, regimes=()) -> ScenarioSet:
    xi_rows = np.atleast_2d(np.asarray(xi_rows, float))
    labels = tuple(labels) if labels is not None else tuple(f"s{i}" for i in range(len(xi_rows)))
    return ScenarioSet(labels, np.asarray(probs, float),
                       tuple(tuple(linear_params_from_xi(r)) for r in xi_rows), tuple(regimes), xi_rows)


# scenario library files -------------------------------------------------------

def _link_params_from_entry(entry: dict, link) -> dict:
    if "intercept" in entry:
        return {"intercept": float(entry["intercept"]), "slope": float(entry["slope"])}
    if "t0" in entry:
        t0 = float(entry["t0"])
    else:
        t0 = 60.0 * link.length_mi / float(entry.get("speed_mph", link.ffs_mph))
    if "capacity" in entry:
        cap = float(entry["capacity"])
    else:
        cap = int(entry.get("lanes", link.lanes)) * link.cap_per_lane
    return {"t0": t0, "alpha": float(entry.get("alpha", 0.15)), "beta": float(entry.get("beta", 4.0)),
            "capacity": cap, "delay": float(entry.get("delay", 0.0))}


def scenarios_from_dict(data, net: NetworkInstance) -> ScenarioSet:
    entries = data["scenarios"] if isinstance(data, dict) else data
    labels, probs, params, regimes, xis = [], [], [], [], []
    for e in entries:
        labels.append(str(e["label"]))
        probs.append(float(e["prob"]))
        regimes.append(e.get("regime"))
        if "params" in e:
            params.append(tuple(_link_params_from_entry(e["params"][l.id], l) for l in net.links))
        elif "xi" in e:
            params.append(tuple(linear_params_from_xi(e["xi"])))
        else:
            raise ScenarioError(f"scenario {e['label']}: needs params or xi")
        xis.append(e.get("xi"))
    xi = np.array(xis, float) if all(x is not None for x in xis) else None
    regimes = tuple(regimes) if any(r is not None for r in regimes) else ()
    return ScenarioSet(tuple(labels), np.array(probs), tuple(params), regimes, xi)


def load_scenarios(path, net: NetworkInstance) -> ScenarioSet:
    with open(path) as fh:
        return scenarios_from_dict(json.load(fh), net)


def scenarios_to_list(scen: ScenarioSet, net: NetworkInstance) -> list[dict]:
    out = []
    for s in range(scen.n_scenarios):
        e = {"label": scen.labels[s], "prob": float(scen.probs[s]),
             "regime": scen.regimes[s] if scen.regimes else None,
             "params": {l.id: dict(scen.params[s][a]) for a, l in enumerate(net.links)}}
        if scen.xi is not None:
            e["xi"] = [float(v) for v in scen.xi[s]]
        out.append(e)
    return out


# safe speed and depth noise ---------------------------------------------------

def stopping_distance(v0: float = DESIGN_SPEED_MS, mu0: float = 0.55, t_r: float = 1.5) -> float:
    """Dry-pavement stopping distance that reproduces ``v0`` at zero depth."""
    return v0 * t_r + v0 * v0 / (2.0 * GRAVITY * mu0)


def safe_speed(h, mu0: float = 0.55, beta_f: float = 0.05, t_r: float = 1.5, S: float | None = None):
    """Largest speed (m/s) that can stop within ``S`` on a water film of depth ``h`` mm."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ScenarioError("water depth must be nonnegative")
    if S is None:
        S = stopping_distance(DESIGN_SPEED_MS, mu0, t_r)
    decel = GRAVITY * mu0 * np.exp(-beta_f * h)
    v = -decel * t_r + np.sqrt((decel * t_r) ** 2 + 2.0 * decel * S)
    return v if v.ndim else float(v)


def perturb_depths(d_base, seed: int = 2025, mult_sd: float = 0.5, add_mean: float = 5.0,
                   add_sd: float = 2.0) -> np.ndarray:
    d = np.asarray(d_base, dtype=float)
    if np.any(d < 0):
        raise ScenarioError("depths must be nonnegative")
    rng = np.random.default_rng(seed)
    m = rng.normal(1.0, mult_sd, size=d.shape)
    a = rng.normal(add_mean, add_sd, size=d.shape)
    return np.where(d > 0, np.maximum(0.0, d * m + a), d)


# severity clustering ------------------------------------------------------------

@dataclass(frozen=True)
class SeverityLevel:
    label: str
    speed_mph: float
    lanes: int
    count: int
    prob: float


def _kmeans_1d(x: np.ndarray, k: int, seed: int, max_iter: int = 300):
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        dist = np.min(np.abs(x[:, None] - np.array(centers)[None, :]), axis=1)
        centers.append(x[int(np.argmax(dist))])
    centers = np.array(centers, dtype=float)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            if np.any(assign == j):
                centers[j] = x[assign == j].mean()
    return centers, assign


def cluster_severities(samples, k: int = 5, seed: int = 2025, lanes: int = 1,
                       labels=SEVERITY_LABELS) -> list[SeverityLevel]:
    """Cluster one link's speed samples into ``k`` severity levels, slowest first."""
    x = np.asarray(samples, dtype=float).ravel()
    if k < 1:
        raise ScenarioError("k must be positive")
    if len(np.unique(x)) < k:
        raise ScenarioError(f"need at least {k} distinct samples, got {len(np.unique(x))}")
    if k == 1:
        return [SeverityLevel(labels[-1], float(x.mean()), lanes, len(x), 1.0)]
    centers, assign = _kmeans_1d(x, k, seed)
    order = np.argsort(centers, kind="stable")
    names = labels if k == len(labels) else tuple(f"level{j + 1}" for j in range(k))
    out = []
    for rank, j in enumerate(order):
        count = int(np.sum(assign == j))
        out.append(SeverityLevel(names[rank], float(centers[j]), lanes, count, count / len(x)))
    return out


def read_severity_csv(path) -> dict[str, list[SeverityLevel]]:
    table: dict[str, list[SeverityLevel]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            table.setdefault(r["link"], []).append(
                SeverityLevel(r["severity"], float(r["speed_mph"]), int(r["lanes"]), 0, float(r["prob"])))
    for levels in table.values():
        levels.sort(key=lambda s: s.speed_mph)
    return table


def write_severity_csv(path, table: dict[str, list[SeverityLevel]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link", "severity", "lanes", "speed_mph", "prob"])
        for link, levels in table.items():
            for s in levels:
                w.writerow([link, s.label, s.lanes, f"{s.speed_mph:.6f}", f"{s.prob:.6f}"])


def build_joint_scenarios(net: NetworkInstance, table: dict[str, list[SeverityLevel]],
                          coupling: str = "comonotone", alpha: float = 0.15, beta: float = 4.0) -> ScenarioSet:
    """Combine per-link severity levels into network scenarios, mildest first.

    Under the comonotone coupling scenario ``s`` puts every link at its
    ``s``-th fastest level; its probability is the mean of those per-link
    probabilities, renormalized.  Coordinates are the per-link speeds (mph).
    """
    if coupling != "comonotone":
        raise ScenarioError(f"unsupported coupling {coupling!r}")
    levels = [sorted(table[l.id], key=lambda s: -s.speed_mph) for l in net.links]
    sizes = {len(v) for v in levels}
    if len(sizes) != 1:
        raise ScenarioError("ragged severity tables: links have different level counts")
    S = sizes.pop()
    probs = np.array([np.mean([lv[s].prob for lv in levels]) for s in range(S)])
    probs = probs / probs.sum()
    params, xi, labels = [], [], []
    for s in range(S):
        row = []
        for l, lv in zip(net.links, levels):
            row.append({"t0": 60.0 * l.length_mi / lv[s].speed_mph, "alpha": alpha, "beta": beta,
                        "capacity": lv[s].lanes * l.cap_per_lane, "delay": 0.0})
        params.append(tuple(row))
        xi.append([lv[s].speed_mph for lv in levels])
        labels.append(levels[0][s].label)
    return ScenarioSet(tuple(labels), probs, tuple(params), (), np.array(xi))


def baseline_scenarios(net: NetworkInstance, alpha: float = 0.15, beta: float = 4.0) -> ScenarioSet:
    row = tuple({"t0": l.free_flow_minutes, "alpha": alpha, "beta": beta, "capacity": l.capacity, "delay": 0.0}
                for l in net.links)
    return ScenarioSet(("baseline",), np.array([1.0]), (row,), (), np.array([[l.ffs_mph for l in net.links]]))


# regime perturbations -------------------------------------------------------------

@dataclass(frozen=True)
class RegimePerturbationSpec:
    regimes: tuple[str, ...]
    mean_a: dict
    mean_b: dict
    counts: dict
    shape_a: float = 2.0
    shape_b: float = 3.0
    rho0: float = 3.2
    seed: int = 2025

    def __post_init__(self):
        for w in self.regimes:
            if self.counts[w] < 1:
                raise ScenarioError(f"regime {w}: needs at least one sample")
            if np.any(np.asarray(self.mean_a[w]) <= 0) or np.any(np.asarray(self.mean_b[w]) <= 0):
                raise ScenarioError(f"regime {w}: perturbation means must be positive")
        if self.shape_a <= 0 or self.shape_b <= 0:
            raise ScenarioError("gamma shapes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RegimePerturbationSpec":
        regimes = tuple(d["regimes"])
        return cls(regimes, {w: tuple(d["mean_a"][w]) for w in regimes}, {w: tuple(d["mean_b"][w]) for w in regimes},
                   {w: int(d["counts"][w]) for w in regimes}, float(d.get("shape_a", 2.0)),
                   float(d.get("shape_b", 3.0)), float(d.get("rho0", 3.2)), int(d.get("seed", 2025)))


def sample_regime_perturbations(spec: RegimePerturbationSpec):
    """Gamma perturbation vectors ``(da_1, db_1, da_2, db_2, ...)`` and radii per regime.

    The first regime is the reference for the radius scaling
    ``rho_w = rho0 * sqrt(N_ref / N_w)``.
    """
    rng = np.random.default_rng(spec.seed)
    n_ref = spec.counts[spec.regimes[0]]
    samples, radii = {}, {}
    for w in spec.regimes:
        ma = np.asarray(spec.mean_a[w], float)
        mb = np.asarray(spec.mean_b[w], float)
        n = spec.counts[w]
        da = rng.gamma(spec.shape_a, ma / spec.shape_a, size=(n, ma.size))
        db = rng.gamma(spec.shape_b, mb / spec.shape_b, size=(n, mb.size))
        xi = np.empty((n, 2 * ma.size))
        xi[:, 0::2] = da
        xi[:, 1::2] = db
        samples[w] = xi
        radii[w] = spec.rho0 * np.sqrt(n_ref / n)
    return samples, radii
