"""Synthetic advection-diffusion benchmark with moving heterogeneous observations.

Ground truth lives on a periodic ``grid_ny x grid_nx`` lattice of cell
centres; each step is a semi-Lagrangian advection (bilinear departure-point
interpolation) followed by an explicit five-point diffusion update.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import VARIABLES, GraphSnapshot, GridNode, LatLon, ObsNode

log = logging.getLogger(__name__)

OBS_ID_BASE = 1_000_000
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid simulation or training configuration."""


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``record`` is the offending record/line index."""

    def __init__(self, msg, path=None, record=None):
        super().__init__(f"{path}: record {record}: {msg}" if record is not None else f"{path}: {msg}")
        self.path = path
        self.record = record


@dataclass(frozen=True)
class PlatformSpec:
    name: str
    motion: str = "sweeping"          # "stationary" | "sweeping"
    count: int = 10                   # footprints per step
    variables: tuple = VARIABLES
    noise_sigma: float = 0.0          # in units of each variable's scale
    speed_deg: float = 1.0            # sweeping: centroid longitude change per step
    start_lon: Optional[float] = None
    spread_deg: float = 1.0           # sweeping: half-width of the footprint cloud in lon

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _reject_unknown(cls, d, f"platform {d.get('name')!r}")
        if "variables" in d:
            d["variables"] = tuple(d["variables"])
        return cls(**d)


@dataclass(frozen=True)
class SimConfig:
    grid_nx: int = 20
    grid_ny: int = 20
    lat_min: float = 34.0
    lat_max: float = 42.0
    lon_min: float = 124.0
    lon_max: float = 133.0
    dt_hours: float = 6.0
    steps: int = 120
    # velocities are in grid cells per step
    velocity_u: float = 0.8
    velocity_v: float = 0.5
    vortex_strength: float = 0.2
    vortex_radius: float = 4.0
    diffusion: float = 0.02           # cells^2 per step
    init_modes: int = 3
    init_kmax: int = 3                # highest Fourier wavenumber in random patterns
    forcing: float = 0.15             # per-step random forcing, in units of var_scale
    spinup: int = 60                  # steps integrated and discarded before t = 0
    var_mean: tuple = (8.0, 0.0, 255.0, 0.002)
    var_scale: tuple = (6.0, 6.0, 4.0, 0.001)
    platforms: tuple = field(default_factory=lambda: default_platforms())
    seed: int = 0
    train_frac: float = 0.6
    val_frac: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "platforms", tuple(
            p if isinstance(p, PlatformSpec) else PlatformSpec.from_dict(p) for p in self.platforms))
        object.__setattr__(self, "var_mean", tuple(float(x) for x in self.var_mean))
        object.__setattr__(self, "var_scale", tuple(float(x) for x in self.var_scale))

    @property
    def dlat(self):
        return (self.lat_max - self.lat_min) / self.grid_ny

    @property
    def dlon(self):
        return (self.lon_max - self.lon_min) / self.grid_nx

    @property
    def diffusion_number(self):
        # 2-D FTCS on unit cells: kappa * dt * (1/dx^2 + 1/dy^2)
        return 2.0 * self.diffusion

    def validate(self):
        bad = []
        for name in ("grid_nx", "grid_ny", "steps"):
            if getattr(self, name) <= 0:
                bad.append(name)
        if not self.lat_max > self.lat_min:
            bad.append("lat_min/lat_max")
        if not self.lon_max > self.lon_min:
            bad.append("lon_min/lon_max")
        if self.diffusion < 0:
            bad.append("diffusion")
        if self.forcing < 0:
            bad.append("forcing")
        if self.spinup < 0:
            bad.append("spinup")
        if self.init_modes < 0 or self.init_kmax < 1:
            bad.append("init_modes/init_kmax")
        if len(self.var_mean) != len(VARIABLES) or len(self.var_scale) != len(VARIABLES):
            bad.append("var_mean/var_scale")
        for p in self.platforms:
            if p.count <= 0:
                bad.append(f"platforms[{p.name}].count")
            if p.noise_sigma < 0:
                bad.append(f"platforms[{p.name}].noise_sigma")
            if p.motion not in ("stationary", "sweeping"):
                bad.append(f"platforms[{p.name}].motion")
            if not p.variables or any(v not in VARIABLES for v in p.variables):
                bad.append(f"platforms[{p.name}].variables")
        if not (0 < self.train_frac and 0 <= self.val_frac and self.train_frac + self.val_frac < 1):
            bad.append("train_frac/val_frac")
        if bad:
            raise ConfigError("invalid simulation parameters: " + ", ".join(bad))
        if self.diffusion_number > 0.5:
            raise ConfigError(
                f"CFL violation: diffusion number {self.diffusion_number:.3f} > 0.5 "
                f"(diffusion={self.diffusion} cells^2/step)")
        return self

    def to_dict(self):
        d = asdict(self)
        d["var_mean"] = list(self.var_mean)
        d["var_scale"] = list(self.var_scale)
        for p in d["platforms"]:
            p["variables"] = list(p["variables"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _reject_unknown(cls, d, "sim")
        return cls(**d)


def _reject_unknown(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def default_platforms():
    return (
        PlatformSpec("sonde", motion="stationary", count=12, variables=VARIABLES, noise_sigma=0.05),
        PlatformSpec("aircraft", motion="sweeping", count=8, variables=("U", "V", "T"),
                     noise_sigma=0.1, speed_deg=1.3, start_lon=125.0, spread_deg=1.5),
        PlatformSpec("amv", motion="sweeping", count=10, variables=("U", "V"),
                     noise_sigma=0.2, speed_deg=-0.9, start_lon=131.0, spread_deg=2.0),
        PlatformSpec("mw_sounder", motion="sweeping", count=10, variables=("T", "Q"),
                     noise_sigma=0.3, speed_deg=2.1, start_lon=127.0, spread_deg=1.0),
        PlatformSpec("ir_sounder", motion="sweeping", count=10, variables=("T",),
                     noise_sigma=0.5, speed_deg=-1.7, start_lon=129.0, spread_deg=1.5),
        PlatformSpec("gnss_ro", motion="sweeping", count=6, variables=("T", "Q"),
                     noise_sigma=0.15, speed_deg=0.7, start_lon=132.0, spread_deg=2.5),
        PlatformSpec("scatterometer", motion="sweeping", count=8, variables=("U", "V"),
                     noise_sigma=0.25, speed_deg=1.1, start_lon=124.5, spread_deg=1.2),
    )


# ---------------------------------------------------------------- dynamics

def velocity_field(cfg: SimConfig):
    """Per-cell (u, v) in cells/step: uniform drift plus a Gaussian vortex."""
    ny, nx = cfg.grid_ny, cfg.grid_nx
    yy, xx = np.meshgrid(np.arange(ny, dtype=float), np.arange(nx, dtype=float), indexing="ij")
    u = np.full((ny, nx), float(cfg.velocity_u))
    v = np.full((ny, nx), float(cfg.velocity_v))
    if cfg.vortex_strength:
        cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
        dy, dx = yy - cy, xx - cx
        r2 = dx * dx + dy * dy
        env = cfg.vortex_strength * np.exp(0.5 - r2 / (2.0 * cfg.vortex_radius ** 2)) / cfg.vortex_radius
        u = u - env * dy
        v = v + env * dx
    return u, v


def periodic_bilinear(field2d, y, x):
    """Bilinear interpolation of ``field2d[y, x]`` at fractional indices with wrap-around."""
    ny, nx = field2d.shape[:2]
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = y - y0
    fx = x - x0
    y0 = y0.astype(int) % ny
    x0 = x0.astype(int) % nx
    y1 = (y0 + 1) % ny
    x1 = (x0 + 1) % nx
    if field2d.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    return ((1 - fy) * (1 - fx) * field2d[y0, x0] + (1 - fy) * fx * field2d[y0, x1]
            + fy * (1 - fx) * field2d[y1, x0] + fy * fx * field2d[y1, x1])


def advect(state, u, v):
    ny, nx = state.shape[:2]
    yy, xx = np.meshgrid(np.arange(ny, dtype=float), np.arange(nx, dtype=float), indexing="ij")
    return periodic_bilinear(state, yy - v, xx - u)


def diffuse(state, kappa):
    if kappa == 0:
        return state
    lap = (np.roll(state, 1, 0) + np.roll(state, -1, 0) + np.roll(state, 1, 1)
           + np.roll(state, -1, 1) - 4.0 * state)
    return state + kappa * lap


def step_field(state, u, v, kappa):
    if np.any(u) or np.any(v):
        state = advect(state, u, v)
    return diffuse(state, kappa)


def random_modes(cfg: SimConfig, rng):
    """Zero-mean smooth random pattern per variable: a few Fourier modes, unit spatial std."""
    ny, nx = cfg.grid_ny, cfg.grid_nx
    yy, xx = np.meshgrid(np.arange(ny) / ny, np.arange(nx) / nx, indexing="ij")
    out = np.empty((ny, nx, len(VARIABLES)))
    for c in range(len(VARIABLES)):
        f = np.zeros((ny, nx))
        for _ in range(cfg.init_modes):
            ky, kx = rng.integers(1, cfg.init_kmax + 1, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            f += rng.normal() * np.cos(2 * np.pi * (ky * yy + kx * xx) + phase)
            f += 0.5 * rng.normal() * np.sin(2 * np.pi * (ky * yy - kx * xx) + phase)
        out[..., c] = f / (f.std() if f.std() > 0 else 1.0)
    return out


def initial_field(cfg: SimConfig, rng):
    """Random smooth field scaled to physical units."""
    return np.asarray(cfg.var_mean) + np.asarray(cfg.var_scale) * random_modes(cfg, rng)


def simulate_field(cfg: SimConfig, init=None) -> np.ndarray:
    """Integrate the truth field; returns ``(steps, grid_ny, grid_nx, C)``.

    A random initial field is first spun up for ``spinup`` steps so the
    series starts near statistical equilibrium; an explicit ``init`` is used
    as step 0 as is. With ``forcing > 0`` every step also receives a fresh zero-mean random
    pattern of std ``forcing * var_scale``, which keeps the field from
    decaying to its mean under diffusion.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    frng = np.random.default_rng([cfg.seed, 2])
    state = initial_field(cfg, rng) if init is None else np.array(init, dtype=float)
    u, v = velocity_field(cfg)
    scale = np.asarray(cfg.var_scale) * cfg.forcing

    def advance(s):
        s = step_field(s, u, v, cfg.diffusion)
        return s + scale * random_modes(cfg, frng) if cfg.forcing else s

    if init is None:
        for _ in range(cfg.spinup):
            state = advance(state)
    out = np.empty((cfg.steps,) + state.shape)
    out[0] = state
    for t in range(1, cfg.steps):
        state = advance(state)
        out[t] = state
    if not np.all(np.isfinite(out)):
        raise ConfigError("simulation produced non-finite values")
    return out


# ---------------------------------------------------------------- observations

def grid_locations(cfg: SimConfig):
    """Cell-centre (lat, lon) per flattened cell, row-major over (y, x)."""
    lat = cfg.lat_min + (np.arange(cfg.grid_ny) + 0.5) * cfg.dlat
    lon = cfg.lon_min + (np.arange(cfg.grid_nx) + 0.5) * cfg.dlon
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    return np.stack([la.ravel(), lo.ravel()], axis=1)


def interpolate_at(field2d, cfg: SimConfig, lat, lon):
    y = (np.asarray(lat) - cfg.lat_min) / cfg.dlat - 0.5
    x = (np.asarray(lon) - cfg.lon_min) / cfg.dlon - 0.5
    return periodic_bilinear(field2d, y, x)


def sweep_centroid_lon(p: PlatformSpec, cfg: SimConfig, t: int) -> float:
    start = cfg.lon_min if p.start_lon is None else p.start_lon
    width = cfg.lon_max - cfg.lon_min
    return cfg.lon_min + (start - cfg.lon_min + p.speed_deg * t) % width


def footprints(p: PlatformSpec, cfg: SimConfig, t: int, index: int):
    """Footprint (lat, lon) arrays of platform ``p`` at step ``t``."""
    rng = np.random.default_rng([cfg.seed, 1, index])
    if p.motion == "stationary":
        lat = rng.uniform(cfg.lat_min, cfg.lat_max, p.count)
        lon = rng.uniform(cfg.lon_min, cfg.lon_max, p.count)
        return lat, lon
    # fixed cloud shape riding on the moving centroid; lat jitter re-drawn each step
    offs = rng.uniform(-p.spread_deg, p.spread_deg, p.count)
    offs -= offs.mean()
    step_rng = np.random.default_rng([cfg.seed, 2, index, t])
    lat = step_rng.uniform(cfg.lat_min, cfg.lat_max, p.count)
    lon = sweep_centroid_lon(p, cfg, t) + offs
    return lat, lon


def sample_observations(field: np.ndarray, cfg: SimConfig, t: int, rng=None,
                        id_start: int = OBS_ID_BASE) -> list:
    """Observations at step ``t`` in physical units (masked channels hold 0.0)."""
    if not 0 <= t < field.shape[0]:
        raise IndexError(f"step {t} outside [0, {field.shape[0]})")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 3, t])
    out = []
    nid = id_start
    for index, p in enumerate(cfg.platforms):
        lat, lon = footprints(p, cfg, t, index)
        mask = tuple(v in p.variables for v in VARIABLES)
        noise = rng.normal(size=(len(lat), len(VARIABLES)))
        for j in range(len(lat)):
            if not (cfg.lat_min <= lat[j] < cfg.lat_max and cfg.lon_min <= lon[j] < cfg.lon_max):
                continue
            val = interpolate_at(field[t], cfg, lat[j], lon[j])
            vals = tuple(
                float(val[c] + p.noise_sigma * cfg.var_scale[c] * noise[j, c]) if mask[c] else 0.0
                for c in range(len(VARIABLES)))
            out.append(ObsNode(nid, LatLon(float(lat[j]), float(lon[j])), p.name, vals, mask))
            nid += 1
    return out


# ---------------------------------------------------------------- dataset

@dataclass(eq=False)
class Dataset:
    """Truth states (physical units, float32), observations, split and normalisation."""

    config: Optional[SimConfig]
    states: np.ndarray                      # (steps, cells, C) float32
    grid_locs: np.ndarray                   # (cells, 2) lat, lon
    obs: list                               # per step list of ObsNode (physical units)
    norm_mean: np.ndarray
    norm_std: np.ndarray
    splits: dict                            # name -> (start, stop) over steps

    def __post_init__(self):
        self._snapshots = {}

    @property
    def n_steps(self):
        return self.states.shape[0]

    @property
    def n_cells(self):
        return self.states.shape[1]

    @property
    def grid_ids(self):
        return list(range(self.n_cells))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.norm_mean) / self.norm_std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.norm_std + self.norm_mean

    def snapshot(self, t: int, radius_km: float = 50.0, obs_obs: bool = True) -> GraphSnapshot:
        """Normalised snapshot at step ``t`` with radius edges (cached)."""
        key = (t, float(radius_km), bool(obs_obs))
        snap = self._snapshots.get(key)
        if snap is None:
            from .graphbuild import build_radius_edges

            z = self.normalize(self.states[t])
            grid = tuple(GridNode(i, LatLon(*self.grid_locs[i]), tuple(z[i].tolist()))
                         for i in range(self.n_cells))
            obs = []
            for o in self.obs[t]:
                mk = np.array(o.mask)
                zo = np.where(mk, self.normalize(o.features), 0.0)
                obs.append(ObsNode(o.id, o.loc, o.platform, tuple(zo.tolist()), o.mask))
            nodes = grid + tuple(obs)
            el = build_radius_edges(nodes, radius_km, obs_obs=obs_obs)
            snap = GraphSnapshot(t, grid, tuple(obs), tuple(map(tuple, el.pairs.tolist())))
            self._snapshots[key] = snap
        return snap

    def platforms(self):
        if self.config is not None:
            return [p.name for p in self.config.platforms]
        return sorted({o.platform for step in self.obs for o in step})


def split_bounds(steps: int, train_frac: float = 0.6, val_frac: float = 0.2) -> dict:
    """Chronological train/val/test step ranges (6:2:2 by default)."""
    a = int(round(steps * train_frac))
    b = int(round(steps * (train_frac + val_frac)))
    return {"train": (0, a), "val": (a, b), "test": (b, steps)}


def generate_dataset(cfg: SimConfig) -> Dataset:
    cfg.validate()
    field = simulate_field(cfg)
    steps = cfg.steps
    flat = field.reshape(steps, -1, len(VARIABLES)).astype(np.float32)
    obs, nid = [], OBS_ID_BASE
    for t in range(steps):
        o = sample_observations(field, cfg, t, id_start=nid)
        nid += len(o)
        obs.append(o)
    splits = split_bounds(steps, cfg.train_frac, cfg.val_frac)
    a, b = splits["train"]
    tr = flat[a:b].astype(np.float64)
    mean = tr.mean(axis=(0, 1))
    std = tr.std(axis=(0, 1))
    std[std == 0] = 1.0
    log.info("simulated %d steps, %d cells, %d observations", steps, flat.shape[1], nid - OBS_ID_BASE)
    return Dataset(cfg, flat, grid_locations(cfg), obs, mean, std, splits)


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "variables": list(VARIABLES),
        "steps": int(ds.n_steps),
        "cells": int(ds.n_cells),
        "config": None if ds.config is None else ds.config.to_dict(),
        "normalization": {"mean": [float(x) for x in ds.norm_mean],
                          "std": [float(x) for x in ds.norm_std]},
        "splits": {k: list(v) for k, v in ds.splits.items()},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(path / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lat", "lon"])
        for i, (la, lo) in enumerate(ds.grid_locs):
            w.writerow([i, repr(float(la)), repr(float(lo))])
    (path / "states.bin").write_bytes(np.ascontiguousarray(ds.states, dtype="<f4").tobytes())
    with open(path / "obs.jsonl", "w") as fh:
        for t, step in enumerate(ds.obs):
            for o in step:
                rec = {"t": t, "id": o.id, "lat": o.loc.lat_deg, "lon": o.loc.lon_deg,
                       "platform": o.platform, "values": list(o.features),
                       "mask": [bool(m) for m in o.mask]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


_OBS_KEYS = {"t", "id", "lat", "lon", "platform", "values", "mask"}


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid JSON: {e}", path / "meta.json", 0) from e
    steps, cells = int(meta["steps"]), int(meta["cells"])
    C = len(meta.get("variables", VARIABLES))
    cfg = None if meta.get("config") is None else SimConfig.from_dict(meta["config"])

    locs = []
    with open(path / "grid.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "lat", "lon"]:
        raise DatasetFormatError("missing header", path / "grid.csv", 0)
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != 3 or int(row[0]) != i - 1:
            raise DatasetFormatError("expected id,lat,lon in id order", path / "grid.csv", i)
        locs.append((float(row[1]), float(row[2])))
    if len(locs) != cells:
        raise DatasetFormatError(f"{len(locs)} grid rows, meta says {cells}", path / "grid.csv", len(locs) + 1)

    raw = (path / "states.bin").read_bytes()
    expect = steps * cells * C * 4
    if len(raw) != expect:
        rec = len(raw) // (4 * C) if C else 0
        raise DatasetFormatError(f"states.bin has {len(raw)} bytes, expected {expect}",
                                 path / "states.bin", rec)
    states = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(steps, cells, C)

    obs = [[] for _ in range(steps)]
    with open(path / "obs.jsonl") as fh:
        for i, line in enumerate(fh):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"truncated or invalid record: {e.msg}", path / "obs.jsonl", i) from e
            if not isinstance(rec, dict) or set(rec) != _OBS_KEYS:
                raise DatasetFormatError("record fields do not match schema", path / "obs.jsonl", i)
            if len(rec["values"]) != C or len(rec["mask"]) != C or not 0 <= rec["t"] < steps:
                raise DatasetFormatError("bad values/mask width or step", path / "obs.jsonl", i)
            obs[rec["t"]].append(ObsNode(int(rec["id"]), LatLon(rec["lat"], rec["lon"]), rec["platform"],
                                         tuple(float(v) for v in rec["values"]),
                                         tuple(bool(m) for m in rec["mask"])))
    norm = meta["normalization"]
    return Dataset(cfg, states, np.array(locs, dtype=float).reshape(-1, 2), obs,
                   np.array(norm["mean"], dtype=float), np.array(norm["std"], dtype=float),
                   {k: tuple(v) for k, v in meta["splits"].items()})


def empty_dataset() -> Dataset:
    C = len(VARIABLES)
    return Dataset(None, np.zeros((0, 0, C), np.float32), np.zeros((0, 2)), [],
                   np.zeros(C), np.ones(C), {"train": (0, 0), "val": (0, 0), "test": (0, 0)})


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return (
        (a.config is None) == (b.config is None)
        and (a.config is None or a.config.to_dict() == b.config.to_dict())
        and a.states.shape == b.states.shape
        and a.states.tobytes() == b.states.tobytes()
        and np.array_equal(a.grid_locs, b.grid_locs)
        and a.obs == b.obs
        and np.array_equal(a.norm_mean, b.norm_mean)
        and np.array_equal(a.norm_std, b.norm_std)
        and {k: tuple(v) for k, v in a.splits.items()} == {k: tuple(v) for k, v in b.splits.items()}
    )

