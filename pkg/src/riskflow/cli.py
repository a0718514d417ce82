"""Command-line driver: ``riskflow solve | build-scenarios | calibrate-rho | compare | enumerate-paths``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report
from .dro import (AmbiguitySpec, DroError, LinearCoefficientModel, benders_exchange, calibrate_radius,
                  solve_dro_affine, solve_joint_frequency_robust, solve_regime_scenario_A,
                  solve_regime_scenario_B, split_confidence)
from .equilibrium import METHODS, TsueConfig, calibrated_profile, solve_approach_B, solve_tsue
from .kernel import KernelError
from .network import InfeasibleODError, NetworkError, enumerate_paths, filter_reliable_paths, load_network
from .risk import RiskError, RiskProfile
from .scenarios import (MPH_TO_MS, RegimePerturbationSpec, ScenarioError, build_joint_scenarios,
                        cluster_severities, linear_scenarios, load_scenarios, perturb_depths,
                        read_severity_csv, safe_speed, sample_regime_perturbations, scenarios_to_list,
                        write_severity_csv)

log = logging.getLogger("riskflow")

DATA_DIR = Path(__file__).parent / "data"
DRO_METHODS = ("DRO-Benders", "DRO-affine", "DRO-scenario-A", "DRO-scenario-B", "DRO-joint")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_INFEASIBLE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _resolve(name, base: Path) -> Path:
    p = Path(name)
    for cand in (p if p.is_absolute() else base / p, DATA_DIR / p):
        if cand.exists():
            return cand
    raise ConfigError(f"file not found: {name}")


def _as_list(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class RunConfig:
    network: Path
    scenarios: dict | Path
    method: str
    alphas: list
    lambdas: list
    theta: float = 1.0
    budgets: list | None = None
    od_csv: Path | None = None
    rho: list = field(default_factory=lambda: [0.0])
    rho_per_regime: dict | None = None
    regimes: Path | None = None
    samples_file: Path | None = None
    epsilon_p: float = 0.0
    tolerances: dict = field(default_factory=dict)
    timings: bool = False
    seed: int = 2025
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path) -> "RunConfig":
        try:
            method = d["method"]
            if method not in METHODS + DRO_METHODS:
                raise ConfigError(f"unknown method {method!r}")
            alphas = [float(a) for a in _as_list(d["alpha"])]
            lambdas = [float(v) for v in _as_list(d["lambda"])]
            if not alphas or not lambdas:
                raise ConfigError("alpha and lambda grids must be nonempty")
            sc = d["scenarios"]
            scen = {k: (_resolve(v, base) if k in ("file", "severity_csv") else v) for k, v in sc.items()} \
                if isinstance(sc, dict) else {"file": _resolve(sc, base)}
            dro = d.get("dro", {})
            cfg = cls(
                network=_resolve(d["network"], base),
                scenarios=scen,
                method=method,
                alphas=alphas,
                lambdas=lambdas,
                theta=float(d.get("theta", 1.0)),
                budgets=None if d.get("budgets") is None else [float(b) for b in _as_list(d["budgets"])],
                od_csv=_resolve(d["od"], base) if d.get("od") else None,
                rho=[float(r) for r in _as_list(dro.get("rho", 0.0))],
                rho_per_regime=dro.get("rho_per_regime"),
                regimes=_resolve(dro["regimes"], base) if dro.get("regimes") else None,
                samples_file=_resolve(dro["samples_file"], base) if dro.get("samples_file") else None,
                epsilon_p=float(dro.get("epsilon_p", 0.0)),
                tolerances=dict(d.get("tolerances", {})),
                timings=bool(d.get("record_timings", False)),
                seed=int(d.get("seed", 2025)),
                raw=d,
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc}") from None
        if dro.get("support", "finite") not in ("finite", "affine"):
            raise ConfigError("dro.support must be finite or affine")
        if any(r < 0 for r in cfg.rho) or cfg.epsilon_p < 0:
            raise ConfigError("radii and frequency budget must be nonnegative")
        if method in ("DRO-scenario-A", "DRO-scenario-B", "DRO-joint") and cfg.regimes is None:
            raise ConfigError(f"{method} needs dro.regimes")
        if not cfg.cells():
            raise ConfigError("no (alpha, lambda) pair with lambda <= alpha")
        return cfg

    def cells(self) -> list[tuple[float, float]]:
        return [(a, l) for a in self.alphas for l in self.lambdas if l <= a + 1e-12]


# ---------------------------------------------------------------------------
# solve


def _load_scenarios(cfg: RunConfig, net):
    sc = cfg.scenarios
    if "file" in sc:
        return load_scenarios(sc["file"], net)
    if "severity_csv" in sc:
        return build_joint_scenarios(net, read_severity_csv(sc["severity_csv"]), sc.get("coupling", "comonotone"),
                                     float(sc.get("alpha", 0.15)), float(sc.get("beta", 4.0)))
    raise ConfigError("scenarios needs 'file' or 'severity_csv'")


def _regime_spec(cfg: RunConfig, scen, seed: int, eps: float) -> AmbiguitySpec:
    with open(cfg.regimes) as fh:
        d = json.load(fh)
    d["seed"] = seed
    rps = RegimePerturbationSpec.from_dict(d)
    samples, radii = sample_regime_perturbations(rps)
    if cfg.rho_per_regime:
        radii = {w: float(cfg.rho_per_regime[w]) for w in rps.regimes}
    if not scen.regimes or scen.xi is None:
        raise ConfigError("regime methods need scenarios with regime labels and coordinates")
    blocks, freqs = {}, {}
    for w in rps.regimes:
        idx = [i for i, r in enumerate(scen.regimes) if r == w]
        if len(idx) != 1:
            raise ConfigError(f"regime {w}: expected exactly one base scenario")
        base = scen.xi[idx[0]]
        n = len(samples[w])
        blocks[w] = linear_scenarios(base + samples[w], np.full(n, 1.0 / n), [f"{w}{i}" for i in range(n)])
        freqs[w] = float(scen.probs[idx[0]])
    return AmbiguitySpec.regimes(blocks, radii, freqs, eps)


def _benders_kw(cfg: RunConfig) -> dict:
    t = cfg.tolerances
    kw = {k: t[k] for k in ("eps_sep", "eps_gap", "max_iter", "audit_every", "prune_after") if k in t}
    if "time_limit" in t:
        kw["time_limit"] = float(t["time_limit"])
    return kw


def _stationary_samples(cfg: RunConfig, scen):
    if cfg.samples_file is None:
        return scen.xi, scen.probs
    with open(cfg.samples_file) as fh:
        entries = json.load(fh)
    xi = np.array([e["xi"] for e in entries], float)
    w = np.array([e.get("weight", 1.0) for e in entries], float)
    return xi, w / w.sum()


def _solve_cell(cfg: RunConfig, net, scen, alpha, lam, rho, seed):
    """Returns (records, converged); a record is (suffix, FlowSolution, objective row extras, trace)."""
    prof = RiskProfile(alpha, lam, cfg.theta, tuple(cfg.budgets or ()))
    m = cfg.method
    if m in METHODS:
        if m in ("ApproachB1", "ApproachB2"):
            sol = solve_tsue(net, scen, TsueConfig(m, prof, **_tsue_tol(cfg)))
        else:
            if not cfg.budgets:
                # path-based modes without explicit budgets borrow the B2 multipliers
                prof = calibrated_profile(prof, solve_approach_B(net, scen, prof).mu)
            sol = solve_tsue(net, scen, TsueConfig(m, prof, **_tsue_tol(cfg)))
        return [("", sol, {}, None)], sol.converged
    if scen.xi is None:
        raise ConfigError("DRO methods need scenario coordinates (xi)")
    if m == "DRO-affine":
        xi, w = _stationary_samples(cfg, scen)
        sol = solve_dro_affine(net, LinearCoefficientModel(net), xi, rho, prof, weights=w)
        return [("", sol, {}, None)], sol.converged
    if m == "DRO-Benders":
        xi, w = _stationary_samples(cfg, scen)
        res = benders_exchange(net, AmbiguitySpec.stationary(scen, rho, xi, w), prof, **_benders_kw(cfg))
    elif m == "DRO-scenario-B":
        out = solve_regime_scenario_B(net, _regime_spec(cfg, scen, seed, 0.0), prof, **_benders_kw(cfg))
        if out.failures:
            raise DroError("; ".join(f"{w}: {e}" for w, e in out.failures.items()))
        recs = [(f"_{w}", r.solution, _bounds(r), r.trace) for w, r in out.per_regime.items()]
        return recs, all(r.converged for r in out.per_regime.values())
    else:
        spec = _regime_spec(cfg, scen, seed, 0.0)
        if m == "DRO-scenario-A":
            res = solve_regime_scenario_A(net, spec, prof, **_benders_kw(cfg))
        else:
            res = solve_joint_frequency_robust(net, spec, cfg.epsilon_p, prof, **_benders_kw(cfg))
    return [("", res.solution, _bounds(res), res.trace)], res.converged


def _bounds(res) -> dict:
    return {"lower_bound": res.lower_bound, "upper_bound": res.upper_bound, "iterations": res.iterations,
            "converged": res.converged}


def _tsue_tol(cfg: RunConfig) -> dict:
    t = cfg.tolerances
    return {k: t[k] for k in ("msa_max_iter", "msa_tol", "step_rule", "freeze_after", "gtol", "ftol", "max_iter")
            if k in t}


def cmd_solve(cfg: RunConfig, out: Path, seed: int, threads: int = 1) -> int:
    net = load_network(cfg.network, od_csv=cfg.od_csv)
    scen = _load_scenarios(cfg, net)
    out.mkdir(parents=True, exist_ok=True)
    rhos = cfg.rho if cfg.method in DRO_METHODS and cfg.method != "DRO-scenario-B" else cfg.rho[:1]
    jobs = [(a, l, r) for r in rhos for (a, l) in cfg.cells()]

    def run(job):
        a, l, r = job
        log.info("solving %s at alpha=%.2f lambda=%.2f rho=%g", cfg.method, a, l, r)
        return _solve_cell(cfg, net, scen, a, l, r, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    all_ok = True
    obj_rows = []
    cells = []
    for (a, l, r), (records, ok) in zip(jobs, results):
        all_ok &= ok
        sub = out / f"rho_{r:g}" if len(rhos) > 1 else out
        sub.mkdir(exist_ok=True)
        tag = report.cell_tag(a, l)
        files = []
        for suffix, sol, extra, trace in records:
            files += report.write_solution_tables(sub, net, sol, tag + suffix)
            if trace is not None:
                name = f"trace_{tag}{suffix}.csv"
                report.write_trace(sub / name, trace, cfg.timings)
                files.append(name)
                for row in trace:
                    log.debug("trace %s%s %s", tag, suffix, row)
            prof = RiskProfile(a, l, cfg.theta)
            rho_col = r if cfg.method in ("DRO-Benders", "DRO-affine") else None
            obj_rows.append((a, l, prof.lam_bar, rho_col, suffix.lstrip("_") or None, sol.objective,
                             sol.mean_part, sol.cvar_part, sol.entropy_part, extra.get("lower_bound"),
                             extra.get("upper_bound"), extra.get("converged", sol.converged),
                             extra.get("iterations", sol.iterations)))
        cells.append({"alpha": a, "lambda": l, "rho": r, "converged": bool(ok),
                      "files": [str((sub / f).relative_to(out)) for f in files]})
    report.write_csv(out / "objective_vs_lambda.csv", report.OBJECTIVE_COLUMNS, obj_rows)
    report.write_manifest(out, "solve", cfg.raw, {"seed": seed, "method": cfg.method, "cells": cells,
                                                 "tolerances": cfg.tolerances})
    if not all_ok:
        log.warning("some grid cells did not converge")
        return EXIT_NONCONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# other commands


def _read_depths(path) -> dict:
    rows = report.read_csv(path)
    if rows and set(rows[0]) != {"node_or_link", "depth_mm"}:
        raise ConfigError("depth csv needs header node_or_link,depth_mm")
    return {r["node_or_link"]: float(r["depth_mm"]) for r in rows}


def cmd_build_scenarios(d: dict, base: Path, out: Path, seed: int) -> int:
    net = load_network(_resolve(d["network"], base))
    depths = _read_depths(_resolve(d["depths"], base))
    n = int(d.get("samples_per_link", 200))
    k = int(d.get("k", 5))
    mu0, beta_f, t_r = float(d.get("mu0", 0.55)), float(d.get("beta_f", 0.05)), float(d.get("t_r", 1.5))
    if n < 1 or k < 1:
        raise ConfigError("samples_per_link and k must be positive")
    # a link takes its own depth if listed, otherwise the deeper of its endpoints
    base_depth = np.array([depths.get(l.id, max(depths.get(l.tail, 0.0), depths.get(l.head, 0.0)))
                           for l in net.links])
    noisy = perturb_depths(np.repeat(base_depth[:, None], n, axis=1), seed=seed)
    speeds = np.minimum(safe_speed(noisy, mu0, beta_f, t_r) / MPH_TO_MS, 30.0)
    speeds = np.round(speeds, 9)
    k_eff = min(k, min(len(np.unique(s)) for s in speeds))
    table = {l.id: cluster_severities(speeds[a], k_eff, seed, l.lanes) for a, l in enumerate(net.links)}
    scen = build_joint_scenarios(net, table, d.get("coupling", "comonotone"), float(d.get("alpha", 0.15)),
                                 float(d.get("beta", 4.0)))
    out.mkdir(parents=True, exist_ok=True)
    write_severity_csv(out / "severity.csv", table)
    with open(out / "scenarios.json", "w") as fh:
        json.dump({"scenarios": scenarios_to_list(scen, net)}, fh, indent=2)
        fh.write("\n")
    report.write_manifest(out, "build-scenarios", d, {
        "seed": seed, "levels": k_eff,
        "safe_speed": {"mu0": mu0, "beta_f": beta_f, "t_r": t_r}, "samples_per_link": n})
    return EXIT_OK


def cmd_calibrate_rho(args) -> int:
    rho = calibrate_radius(args.N, args.delta, args.m, args.nu, args.c1, args.c2)
    snippet = {"rho": rho}
    if args.regime_counts:
        counts = {}
        for item in args.regime_counts.split(","):
            w, c = item.split("=")
            counts[w.strip()] = int(c)
        deltas = split_confidence(args.delta, counts)
        snippet["rho_per_regime"] = {w: calibrate_radius(counts[w], deltas[w], args.m, args.nu, args.c1, args.c2)
                                     for w in counts}
        snippet["delta_per_regime"] = deltas
    print(f"rho = {rho:.6f}")
    print(json.dumps(snippet, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(sp: Path, dro: Path, out: Path) -> int:
    links, objs = report.compare_reports(sp, dro)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "compare_links.csv",
                     ("alpha", "lambda", "link", "sp_flow", "dro_flow", "delta", "delta_pct"), links)
    report.write_csv(out / "compare_objective.csv",
                     ("alpha", "lambda", "sp_objective", "dro_objective", "gap", "gap_sign"), objs)
    for row in objs:
        if row[5] < 0:
            log.warning("DRO objective below SP at alpha=%.2f lambda=%.2f", row[0], row[1])
    return EXIT_OK


def cmd_enumerate_paths(network: Path, out: Path | None, max_hops, tau) -> int:
    net = load_network(network)
    plists = enumerate_paths(net, max_hops)
    if tau is not None:
        plists = filter_reliable_paths(plists, net.links, tau, net.od_pairs)
    rows = []
    for w, plist in enumerate(plists):
        od = net.od_pairs[w]
        for i, p in enumerate(plist):
            rows.append((f"{od.origin}->{od.destination}", i, p.label(), len(p.links), p.p_closed))
    header = ("od", "index", "path", "n_links", "p_closed")
    if out is None:
        print(",".join(header))
        for r in rows:
            print(",".join(report.fmt(v) for v in r))
    else:
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "paths.csv", header, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _setup_logging():
    level = os.environ.get("RISKFLOW_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskflow", description="Risk-averse and robust truncated-logit equilibria.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)

    common(sub.add_parser("solve", help="run a solver over an (alpha, lambda[, rho]) grid"))
    common(sub.add_parser("build-scenarios", help="depths -> severity table and scenario library"))
    cr = sub.add_parser("calibrate-rho", help="finite-sample Wasserstein radius")
    common(cr, config_required=False)
    for name, typ in (("--N", int), ("--delta", float), ("--m", int), ("--nu", float), ("--c1", float),
                      ("--c2", float)):
        cr.add_argument(name, type=typ)
    cr.add_argument("--regime-counts", help="e.g. NR=80,HR=15,FL=2")
    cp = sub.add_parser("compare", help="link and objective deltas between two report trees")
    common(cp, config_required=False)
    cp.add_argument("--sp", type=Path, required=True)
    cp.add_argument("--dro", type=Path, required=True)
    ep = sub.add_parser("enumerate-paths", help="list loop-free paths, optionally reliability filtered")
    common(ep, config_required=False)
    ep.add_argument("--network", type=Path)
    ep.add_argument("--max-hops", type=int)
    ep.add_argument("--tau", type=float)
    return p


def _load_config(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.command == "solve":
            raw = _load_config(args.config)
            cfg = RunConfig.from_dict(raw, args.config.parent)
            seed = cfg.seed if args.seed is None else args.seed
            out = args.out or Path(raw.get("output", "riskflow_out"))
            return cmd_solve(cfg, out, seed, args.threads)
        if args.command == "build-scenarios":
            raw = _load_config(args.config)
            seed = int(raw.get("seed", 2025)) if args.seed is None else args.seed
            return cmd_build_scenarios(raw, args.config.parent, args.out or Path(raw.get("output", "scenarios_out")),
                                       seed)
        if args.command == "calibrate-rho":
            if args.config is not None:
                raw = _load_config(args.config)
                for key in ("N", "delta", "m", "nu", "c1", "c2"):
                    if getattr(args, key) is None and key in raw:
                        setattr(args, key, raw[key])
            missing = [k for k in ("N", "delta", "m", "nu", "c1", "c2") if getattr(args, k) is None]
            if missing:
                raise ConfigError(f"missing radius constants: {', '.join(missing)}")
            return cmd_calibrate_rho(args)
        if args.command == "compare":
            return cmd_compare(args.sp, args.dro, args.out or Path("compare_out"))
        if args.command == "enumerate-paths":
            network = args.network
            if network is None:
                if args.config is None:
                    raise ConfigError("enumerate-paths needs --network or --config")
                raw = _load_config(args.config)
                network = _resolve(raw["network"], args.config.parent)
            return cmd_enumerate_paths(network, args.out, args.max_hops, args.tau)
    except InfeasibleODError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, NetworkError, ScenarioError, RiskError, DroError, KernelError, report.ReportError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
