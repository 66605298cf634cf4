"""Domain types: locations, grid/observation nodes, snapshots, subgraph windows."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np

VARIABLES = ("U", "V", "T", "Q")
GRID, OBS = 0, 1


@dataclass(frozen=True)
class LatLon:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        lat = float(self.lat_deg)
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        lon = float(self.lon_deg)
        if not -180.0 <= lon < 180.0:
            lon = (lon + 180.0) % 360.0 - 180.0
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)


@dataclass(frozen=True)
class GridNode:
    id: int
    loc: LatLon
    features: tuple


@dataclass(frozen=True)
class ObsNode:
    id: int
    loc: LatLon
    platform: str
    features: tuple
    mask: tuple


@dataclass(frozen=True)
class GraphSnapshot:
    t: int
    grid: tuple = ()
    obs: tuple = ()
    edges: tuple = ()

    @property
    def nodes(self):
        return self.grid + self.obs

    @cached_property
    def index(self) -> dict:
        return {n.id: n for n in self.nodes}

    @cached_property
    def adjacency(self) -> dict:
        adj = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "grid": [[n.id, n.loc.lat_deg, n.loc.lon_deg, list(n.features)] for n in self.grid],
            "obs": [[n.id, n.loc.lat_deg, n.loc.lon_deg, n.platform, list(n.features),
                     [bool(m) for m in n.mask]] for n in self.obs],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSnapshot":
        grid = tuple(GridNode(int(i), LatLon(la, lo), tuple(float(v) for v in f))
                     for i, la, lo, f in d["grid"])
        obs = tuple(ObsNode(int(i), LatLon(la, lo), str(p), tuple(float(v) for v in f),
                            tuple(bool(m) for m in mk))
                    for i, la, lo, p, f, mk in d["obs"])
        return cls(int(d["t"]), grid, obs, tuple((int(a), int(b)) for a, b in d["edges"]))


class Violation(NamedTuple):
    rule: str
    subject: object

    def __str__(self):
        return f"{self.rule}({self.subject})"


def validate_snapshot(s: GraphSnapshot, n_channels: Optional[int] = None) -> list:
    """Return every invariant violation in ``s``; an empty list means valid."""
    out = []
    seen = set()
    for n in s.nodes:
        if n.id in seen:
            out.append(Violation("duplicate-id", n.id))
        seen.add(n.id)
    for n in s.grid:
        if n_channels is not None and len(n.features) != n_channels:
            out.append(Violation("feature-width", n.id))
    for n in s.obs:
        if len(n.mask) != len(n.features):
            out.append(Violation("mask-length", n.id))
        if not any(n.mask):
            out.append(Violation("no-valid-channel", n.id))
    pairs = set()
    for a, b in s.edges:
        for end in (a, b):
            if end not in seen:
                out.append(Violation("dangling-edge", end))
        if a == b:
            out.append(Violation("self-edge", a))
        key = (min(a, b), max(a, b))
        if key in pairs:
            out.append(Violation("duplicate-edge", key))
        pairs.add(key)
    return out


@dataclass(frozen=True, eq=False)
class Subgraph:
    """One time step of a k-hop neighbourhood, indexed by local ids.

    Local index 0 is always the target. ``node_ids[local]`` gives the
    original id; ``edges`` are local index pairs (a < b).
    """

    t: int
    node_ids: np.ndarray
    node_type: np.ndarray
    platform: tuple
    features: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    hops: np.ndarray
    edges: np.ndarray
    edge_km: np.ndarray

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @cached_property
    def local_index(self) -> dict:
        return {int(g): i for i, g in enumerate(self.node_ids)}


@dataclass(frozen=True, eq=False)
class SubgraphWindow:
    target_id: int
    snapshots: tuple
    target_next: Optional[np.ndarray] = None
    label_t: Optional[int] = None
    target_current: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.snapshots)


def bfs_hops(adj: dict, source, k: int) -> dict:
    """Shortest-path hop counts from ``source``, truncated at ``k``."""
    hops = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if hops[u] == k:
            continue
        for v in adj[u]:
            if v not in hops:
                hops[v] = hops[u] + 1
                queue.append(v)
    return hops


def validate_window(w: SubgraphWindow, m: int, k: int, snapshots: Sequence[GraphSnapshot] = ()) -> list:
    """Check window invariants; ``snapshots`` (full graphs) enable the BFS check."""
    out = []
    if w.m != m:
        out.append(Violation("window-length", w.m))
    for i, sg in enumerate(w.snapshots):
        ids = [int(x) for x in sg.node_ids]
        if len(set(ids)) != len(ids):
            out.append(Violation("non-bijective-local-ids", i))
        if not ids or ids[0] != w.target_id:
            out.append(Violation("target-missing", i))
            continue
        if np.any(sg.hops > k):
            out.append(Violation("beyond-k-hops", i))
        if snapshots:
            full = snapshots[i]
            expect = bfs_hops(full.adjacency, w.target_id, k)
            if set(expect) != set(ids):
                out.append(Violation("khop-mismatch", i))
    return out
