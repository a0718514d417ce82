"""Result tables, manifests and report comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import re
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import FlowSolution
from .network import NetworkInstance

ROUTE_COLUMNS = ("od", "path_id", "path", "links", "flow", "probability", "generalized_cost", "mu")
LINK_COLUMNS = ("link", "from", "to", "flow")
OBJECTIVE_COLUMNS = ("alpha", "lambda", "lam_bar", "rho", "regime", "objective", "mean_part", "cvar_part", "entropy_part",
                     "lower_bound", "upper_bound", "converged", "iterations")


class ReportError(ValueError):
    pass


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if abs(v) < 5e-7:
            v = 0.0
        return f"{v:.6f}"
    return str(v)


def cell_tag(alpha: float, lam: float) -> str:
    return f"{alpha:.2f}_{lam:.2f}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def validate_solution(net: NetworkInstance, sol: FlowSolution, tol: float = 1e-6):
    """Flow conservation, link reaggregation and probability normalization."""
    f = sol.path_flows
    for w, sl in enumerate(net.od_slices):
        q = net.demands[w]
        if abs(f[sl].sum() - q) > tol * max(1.0, q):
            raise ReportError(f"OD {net.od_label(w)}: path flows do not sum to demand")
        if q > 0 and abs(sol.probabilities[sl].sum() - 1.0) > tol:
            raise ReportError(f"OD {net.od_label(w)}: choice probabilities do not sum to 1")
    if np.abs(net.incidence @ f - sol.link_flows).max(initial=0.0) > tol * max(1.0, float(np.abs(f).max())):
        raise ReportError("link flows do not reaggregate from path flows")


def route_rows(net: NetworkInstance, sol: FlowSolution):
    rows = []
    k = 0
    for w, plist in enumerate(net.paths):
        for p in plist:
            rows.append((net.od_label(w), k, p.label(), " ".join(net.links[a].id for a in p.links), sol.path_flows[k], sol.probabilities[k], sol.costs[k],
                         sol.mu[w]))
            k += 1
    return rows


def link_rows(net: NetworkInstance, sol: FlowSolution):
    return [(l.id, l.tail, l.head, sol.link_flows[a]) for a, l in enumerate(net.links)]


def write_solution_tables(out: Path, net: NetworkInstance, sol: FlowSolution, tag: str) -> list[str]:
    validate_solution(net, sol)
    names = [f"routes_{tag}.csv", f"links_{tag}.csv"]
    write_csv(out / names[0], ROUTE_COLUMNS, route_rows(net, sol))
    write_csv(out / names[1], LINK_COLUMNS, link_rows(net, sol))
    return names


def write_trace(path, trace, timings: bool = False):
    cols = ("iter", "lb", "ub", "gap", "cuts", "seps_skipped", "time_ms")
    rows = [tuple(r[c] if (c != "time_ms" or timings) else None for c in cols) for r in trace]
    write_csv(path, cols, rows)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, command: str, config: dict, extra: dict | None = None) -> dict:
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    files += sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.parent != out)
    manifest = {
        "tool": "riskflow",
        "version": __version__,
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
        "files": {name: sha256_file(out / name) for name in files},
    }
    manifest.update(extra or {})
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# comparison -----------------------------------------------------------------

_LINKS_RE = re.compile(r"^links_(\d+\.\d+)_(\d+\.\d+)\.csv$")


def _link_tables(d: Path) -> dict:
    out = {}
    for p in sorted(d.iterdir()):
        m = _LINKS_RE.match(p.name)
        if m:
            out[(m.group(1), m.group(2))] = {r["link"]: float(r["flow"]) for r in read_csv(p)}
    return out


def _objectives(d: Path) -> dict:
    p = d / "objective_vs_lambda.csv"
    if not p.exists():
        return {}
    out = {}
    for r in read_csv(p):
        key = (f"{float(r['alpha']):.2f}", f"{float(r['lambda']):.2f}")
        if key in out:
            raise ReportError(f"{p}: several rows for cell {key}; compare single-radius, single-regime reports")
        out[key] = float(r["objective"])
    return out


def compare_reports(sp_dir, dro_dir):
    """Per-link percentage deltas and objective gaps between two report trees."""
    sp_dir, dro_dir = Path(sp_dir), Path(dro_dir)
    a, b = _link_tables(sp_dir), _link_tables(dro_dir)
    if not a or set(a) != set(b):
        raise ReportError("reports cover different (alpha, lambda) grids")
    link_out = []
    for key in sorted(a):
        if set(a[key]) != set(b[key]):
            raise ReportError(f"cell {key}: link sets differ")
        for link in a[key]:
            x, y = a[key][link], b[key][link]
            pct = (y - x) / x * 100.0 if x != 0 else (0.0 if y == 0 else np.nan)
            link_out.append((float(key[0]), float(key[1]), link, x, y, y - x, pct))
    oa, ob = _objectives(sp_dir), _objectives(dro_dir)
    obj_out = []
    if oa or ob:
        if set(oa) != set(ob):
            raise ReportError("objective tables cover different grids")
        for key in sorted(oa):
            gap = ob[key] - oa[key]
            obj_out.append((float(key[0]), float(key[1]), oa[key], ob[key], gap, int(np.sign(gap))))
    return link_out, obj_out
