"""Distance-based initial edges and k-hop subgraph windows."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .datamodel import GRID, OBS, GraphSnapshot, LatLon, ObsNode, Subgraph, SubgraphWindow, bfs_hops
from .synthgen import ConfigError

EARTH_RADIUS_KM = 6371.0


def haversine_km(a: LatLon, b: LatLon) -> float:
    return float(haversine_np(a.lat_deg, a.lon_deg, b.lat_deg, b.lon_deg))


def haversine_np(lat1, lon1, lat2, lon2):
    """Vectorised great-circle distance in km."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Undirected pairs ``(a, b)`` with ``a < b`` sorted lexicographically, plus distances."""

    pairs: np.ndarray   # (E, 2) int64 node ids
    km: np.ndarray      # (E,)

    def __len__(self):
        return len(self.pairs)

    def as_set(self):
        return {(int(a), int(b)) for a, b in self.pairs}


def _unit_vectors(lat, lon):
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=1)


def build_radius_edges(nodes: Sequence, radius_km: float, obs_obs: bool = True) -> EdgeList:
    """Connect every pair within ``radius_km`` great-circle distance.

    Candidate pairs come from a 3-D bucket index over unit-sphere coordinates
    with cells one chord-radius wide; the exact haversine test decides.
    """
    if radius_km <= 0:
        raise ValueError("radius_km must be positive")
    n = len(nodes)
    if n < 2:
        return EdgeList(np.zeros((0, 2), np.int64), np.zeros(0))
    ids = np.array([nd.id for nd in nodes], dtype=np.int64)
    lat = np.array([nd.loc.lat_deg for nd in nodes])
    lon = np.array([nd.loc.lon_deg for nd in nodes])
    is_obs = np.array([isinstance(nd, ObsNode) for nd in nodes])
    xyz = _unit_vectors(lat, lon)
    chord = 2.0 * math.sin(min(radius_km / (2 * EARTH_RADIUS_KM), math.pi / 2)) * (1 + 1e-9)
    cells = np.floor(xyz / chord).astype(np.int64)
    buckets = defaultdict(list)
    for i, c in enumerate(map(tuple, cells)):
        buckets[c].append(i)
    ii, jj = [], []
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for c, members in buckets.items():
        near = []
        for dx, dy, dz in offsets:
            near.extend(buckets.get((c[0] + dx, c[1] + dy, c[2] + dz), ()))
        near = np.array(near)
        for i in members:
            js = near[near > i]
            ii.extend([i] * len(js))
            jj.extend(js.tolist())
    ii, jj = np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64)
    if len(ii):
        d = haversine_np(lat[ii], lon[ii], lat[jj], lon[jj])
        keep = d <= radius_km
        if not obs_obs:
            keep &= ~(is_obs[ii] & is_obs[jj])
        ii, jj, d = ii[keep], jj[keep], d[keep]
    else:
        d = np.zeros(0)
    a, b = ids[ii], ids[jj]
    pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1) if len(a) else np.zeros((0, 2), np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0])) if len(pairs) else np.zeros(0, np.int64)
    return EdgeList(pairs[order], d[order])


def khop_subgraph(s: GraphSnapshot, target: int, k: int) -> Subgraph:
    """Induced subgraph on nodes within ``k`` hops of ``target``.

    Local order: target first, then by (hop, id).
    """
    if target not in s.index:
        raise KeyError(f"target {target} not in snapshot t={s.t}")
    hops = bfs_hops(s.adjacency, target, k)
    order = sorted(hops, key=lambda g: (hops[g], g))
    local = {g: i for i, g in enumerate(order)}
    nodes = [s.index[g] for g in order]
    C = len(nodes[0].features)
    feats = np.zeros((len(nodes), C))
    mask = np.ones((len(nodes), C), dtype=bool)
    ntype = np.zeros(len(nodes), dtype=np.int8)
    platform = []
    coords = np.zeros((len(nodes), 2))
    for i, nd in enumerate(nodes):
        feats[i] = nd.features
        coords[i] = (nd.loc.lat_deg, nd.loc.lon_deg)
        if isinstance(nd, ObsNode):
            ntype[i] = OBS
            mask[i] = nd.mask
            platform.append(nd.platform)
        else:
            ntype[i] = GRID
            platform.append("")
    edges = []
    for g in order:
        for h in s.adjacency[g]:
            if h in local and local[g] < local[h]:
                edges.append((local[g], local[h]))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    if len(edges):
        km = haversine_np(coords[edges[:, 0], 0], coords[edges[:, 0], 1],
                          coords[edges[:, 1], 0], coords[edges[:, 1], 1])
    else:
        km = np.zeros(0)
    return Subgraph(
        t=s.t,
        node_ids=np.array(order, dtype=np.int64),
        node_type=ntype,
        platform=tuple(platform),
        features=feats,
        mask=mask,
        coords=coords,
        hops=np.array([hops[g] for g in order], dtype=np.int64),
        edges=edges,
        edge_km=km,
    )


class WindowSampler:
    """Builds and caches per-(target, step) subgraphs for a dataset."""

    def __init__(self, dataset, m: int = 8, k: int = 3, radius_km: float = 50.0, obs_obs: bool = True):
        if m < 1:
            raise ConfigError("window m must be >= 1")
        if dataset.n_steps < m + 1:
            raise ConfigError(f"dataset has {dataset.n_steps} steps; windows need at least m+1 = {m + 1}")
        self.dataset = dataset
        self.m, self.k = m, k
        self.radius_km, self.obs_obs = radius_km, obs_obs
        self._cache = {}

    def snapshot(self, t):
        return self.dataset.snapshot(t, self.radius_km, self.obs_obs)

    def subgraph(self, target, t):
        key = (target, t)
        sg = self._cache.get(key)
        if sg is None:
            sg = khop_subgraph(self.snapshot(t), target, self.k)
            self._cache[key] = sg
        return sg

    def label_steps(self, split: Optional[str] = None):
        """Label steps ``t+1`` whose full history ``t-m+1..t`` exists, optionally within a split."""
        lo, hi = self.m, self.dataset.n_steps
        if split is not None:
            a, b = self.dataset.splits[split]
            lo, hi = max(lo, a), min(hi, b)
        return list(range(lo, hi))

    def window(self, target, label_t, pretrain=False) -> SubgraphWindow:
        t = label_t - 1
        snaps = tuple(self.subgraph(target, s) for s in range(t - self.m + 1, t + 1))
        cur = np.asarray(self.snapshot(t).index[target].features, dtype=float)
        nxt = None if pretrain else np.asarray(self.snapshot(label_t).index[target].features, dtype=float)
        return SubgraphWindow(target, snaps, nxt, label_t, cur)

    def windows(self, targets: Iterable[int], split: Optional[str] = None, pretrain=False) -> Iterator[SubgraphWindow]:
        for lt in self.label_steps(split):
            for g in targets:
                yield self.window(g, lt, pretrain)


def build_windows(dataset, m: int = 8, k: int = 3, targets: Optional[Sequence[int]] = None,
                  radius_km: float = 50.0, split: Optional[str] = None, pretrain: bool = False,
                  obs_obs: bool = True) -> Iterator[SubgraphWindow]:
    """Stream one window per (target, label step); |targets| * (steps - m) windows without a split."""
    sampler = WindowSampler(dataset, m, k, radius_km, obs_obs)
    if targets is None:
        targets = dataset.grid_ids
    return sampler.windows(targets, split, pretrain)
