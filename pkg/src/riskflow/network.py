"""Directed road network, OD demand, path sets and flow aggregation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np


class NetworkError(ValueError):
    pass


class InfeasibleODError(NetworkError):
    """Raised when an OD pair ends up without any usable path."""

    def __init__(self, origin, destination, reason="no path"):
        self.od = (origin, destination)
        super().__init__(f"OD pair ({origin}, {destination}) is infeasible: {reason}")


@dataclass(frozen=True)
class Link:
    id: str
    tail: str
    head: str
    lanes: int = 1
    cap_per_lane: float = 1900.0
    ffs_mph: float = 30.0
    length_mi: float = 1.0
    p_closed: float = 0.0
    model: str = "bpr"

    def __post_init__(self):
        if self.model not in ("bpr", "linear"):
            raise NetworkError(f"link {self.id}: unknown cost model {self.model!r}")
        if not 0.0 <= self.p_closed <= 1.0:
            raise NetworkError(f"link {self.id}: closure probability outside [0, 1]")
        if self.model == "bpr" and self.capacity <= 0:
            raise NetworkError(f"link {self.id}: BPR link needs positive capacity")

    @property
    def capacity(self) -> float:
        return self.lanes * self.cap_per_lane

    @property
    def free_flow_minutes(self) -> float:
        return 60.0 * self.length_mi / self.ffs_mph


@dataclass(frozen=True)
class Path:
    links: tuple[int, ...]
    nodes: tuple[str, ...]
    p_closed: float = 0.0

    def label(self) -> str:
        return "-".join(self.nodes)


@dataclass(frozen=True)
class ODPair:
    origin: str
    destination: str
    demand: float

    def __post_init__(self):
        if not np.isfinite(self.demand) or self.demand < 0:
            raise NetworkError(f"OD ({self.origin}, {self.destination}): demand must be finite and >= 0")


def path_closure_probability(link_ids, links) -> float:
    keep = 1.0
    for a in link_ids:
        keep *= 1.0 - links[a].p_closed
    return 1.0 - keep


@dataclass(frozen=True)
class NetworkInstance:
    nodes: tuple[str, ...]
    links: tuple[Link, ...]
    od_pairs: tuple[ODPair, ...]
    paths: tuple[tuple[Path, ...], ...] = ()
    incidence: np.ndarray = field(default=None, repr=False, compare=False)
    path_od: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise NetworkError("duplicate node ids")
        ids = [l.id for l in self.links]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate link ids")
        for l in self.links:
            if l.tail not in node_set or l.head not in node_set:
                raise NetworkError(f"link {l.id} references an undeclared node")
        for od in self.od_pairs:
            if od.origin not in node_set or od.destination not in node_set:
                raise NetworkError(f"OD ({od.origin}, {od.destination}) references an undeclared node")
        if self.paths:
            if len(self.paths) != len(self.od_pairs):
                raise NetworkError("one path list per OD pair is required")
            for od, plist in zip(self.od_pairs, self.paths):
                if not plist:
                    raise InfeasibleODError(od.origin, od.destination)
                for p in plist:
                    self._check_path(od, p)
            n_paths = sum(len(p) for p in self.paths)
            inc = np.zeros((len(self.links), n_paths))
            owner = np.zeros(n_paths, dtype=int)
            k = 0
            for w, plist in enumerate(self.paths):
                for p in plist:
                    inc[list(p.links), k] = 1.0
                    owner[k] = w
                    k += 1
            inc.setflags(write=False)
            owner.setflags(write=False)
            object.__setattr__(self, "incidence", inc)
            object.__setattr__(self, "path_od", owner)

    def _check_path(self, od, p):
        if p.nodes[0] != od.origin or p.nodes[-1] != od.destination:
            raise NetworkError(f"path {p.label()} does not join {od.origin} to {od.destination}")
        if len(set(p.nodes)) != len(p.nodes):
            raise NetworkError(f"path {p.label()} repeats a node")
        for i, a in enumerate(p.links):
            l = self.links[a]
            if l.tail != p.nodes[i] or l.head != p.nodes[i + 1]:
                raise NetworkError(f"path {p.label()} is not a directed walk")

    # convenience views -------------------------------------------------
    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_paths(self) -> int:
        return 0 if self.incidence is None else self.incidence.shape[1]

    @property
    def demands(self) -> np.ndarray:
        return np.array([od.demand for od in self.od_pairs], dtype=float)

    @property
    def od_slices(self) -> list[slice]:
        out, start = [], 0
        for plist in self.paths:
            out.append(slice(start, start + len(plist)))
            start += len(plist)
        return out

    @property
    def all_paths(self) -> list[Path]:
        return [p for plist in self.paths for p in plist]

    def link_index(self, link_id: str) -> int:
        for i, l in enumerate(self.links):
            if l.id == link_id:
                return i
        raise KeyError(link_id)

    def find_link(self, tail: str, head: str) -> int:
        for i, l in enumerate(self.links):
            if l.tail == tail and l.head == head:
                return i
        raise KeyError((tail, head))

    def path_from_nodes(self, nodes) -> Path:
        nodes = tuple(str(n) for n in nodes)
        links = tuple(self.find_link(a, b) for a, b in zip(nodes[:-1], nodes[1:]))
        return Path(links, nodes, path_closure_probability(links, self.links))

    def with_paths(self, paths) -> "NetworkInstance":
        return NetworkInstance(self.nodes, self.links, self.od_pairs, tuple(tuple(p) for p in paths))

    def od_label(self, w: int) -> str:
        od = self.od_pairs[w]
        return f"{od.origin}->{od.destination}"


def enumerate_paths(net: NetworkInstance, max_hops: int | None = None) -> list[list[Path]]:
    """All simple directed paths per OD with at most ``max_hops`` links.

    Paths are returned sorted lexicographically by their node sequence, with
    link indices breaking ties between parallel links.
    """
    if not net.nodes:
        raise NetworkError("empty graph")
    if max_hops is None:
        max_hops = len(net.nodes) - 1
    if max_hops < 1:
        raise NetworkError("max_hops must be at least 1")
    out_links: dict[str, list[int]] = {n: [] for n in net.nodes}
    for i, l in enumerate(net.links):
        out_links[l.tail].append(i)

    result = []
    for od in net.od_pairs:
        found = []
        stack = [(od.origin, (od.origin,), ())]
        while stack:
            node, nodes, links = stack.pop()
            if node == od.destination and links:
                found.append((nodes, links))
                continue
            if len(links) == max_hops:
                continue
            for a in out_links[node]:
                nxt = net.links[a].head
                if nxt not in nodes:
                    stack.append((nxt, nodes + (nxt,), links + (a,)))
        if not found:
            raise InfeasibleODError(od.origin, od.destination)
        found.sort()  # node sequence first, link indices break ties between parallel links
        result.append([Path(lk, nd, path_closure_probability(lk, net.links)) for nd, lk in found])
    return result


def filter_reliable_paths(paths, links, tau: float, od_pairs=None) -> list[list[Path]]:
    """Keep paths whose closure probability does not exceed ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise NetworkError("tau must lie in (0, 1]")
    kept = []
    for w, plist in enumerate(paths):
        # recompute rather than trust the cached value
        sub = [p for p in plist if path_closure_probability(p.links, links) <= tau]
        if not sub:
            od = od_pairs[w] if od_pairs is not None else None
            o, d = (od.origin, od.destination) if od is not None else (plist[0].nodes[0], plist[0].nodes[-1])
            raise InfeasibleODError(o, d, f"every path exceeds closure tolerance {tau}")
        kept.append(sub)
    return kept


def aggregate_link_flows(net: NetworkInstance, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (net.n_paths,):
        raise NetworkError(f"expected {net.n_paths} path flows, got shape {f.shape}")
    return net.incidence @ f


def od_totals(net: NetworkInstance, f) -> np.ndarray:
    return np.bincount(net.path_od, weights=np.asarray(f, float), minlength=len(net.od_pairs))


# file formats ---------------------------------------------------------------

def read_od_csv(path) -> list[ODPair]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"origin", "destination", "demand"}:
        raise NetworkError("OD csv needs header origin,destination,demand")
    return [ODPair(r["origin"], r["destination"], float(r["demand"])) for r in rows]


def network_from_dict(data: dict, base_dir=None, od_csv=None) -> NetworkInstance:
    nodes = tuple(str(n) for n in data["nodes"])
    links = tuple(
        Link(
            id=str(l["id"]),
            tail=str(l["from"]),
            head=str(l["to"]),
            lanes=int(l.get("lanes", 1)),
            cap_per_lane=float(l.get("cap_per_lane", 1900.0)),
            ffs_mph=float(l.get("ffs_mph", 30.0)),
            length_mi=float(l.get("length_mi", 1.0)),
            p_closed=float(l.get("p_closed", 0.0)),
            model=str(l.get("model", "bpr")),
        )
        for l in data["links"]
    )
    if od_csv is not None:
        ods = tuple(read_od_csv(od_csv))
    elif isinstance(data.get("od"), str):
        ods = tuple(read_od_csv(FsPath(base_dir or ".") / data["od"]))
    else:
        ods = tuple(ODPair(str(o["origin"]), str(o["destination"]), float(o["demand"])) for o in data["od"])
    net = NetworkInstance(nodes, links, ods)
    if "paths" in data:
        per_od = {(od.origin, od.destination): [] for od in ods}
        for entry in data["paths"]:
            nodes_seq = [str(n) for n in entry["nodes"]]
            per_od[(nodes_seq[0], nodes_seq[-1])].append(net.path_from_nodes(nodes_seq))
        plists = [per_od[(od.origin, od.destination)] for od in ods]
    else:
        plists = enumerate_paths(net, data.get("max_hops"))
        if "tau" in data:
            plists = filter_reliable_paths(plists, links, float(data["tau"]), ods)
    return net.with_paths(plists)


def load_network(path, od_csv=None) -> NetworkInstance:
    path = FsPath(path)
    with open(path) as fh:
        data = json.load(fh)
    return network_from_dict(data, base_dir=path.parent, od_csv=od_csv)
