"""Parameter container, padded window batches, and the full forward pass."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datamodel import GRID, OBS, VARIABLES
from .encoder import (
    GRU_KEYS,
    gcn_forward,
    gru_aggregate,
    gru_step,
    mlp,
    normalize_adjacency,
    normalize_adjacency_np,
    skip_readout,
)
from .structlearn import (
    build_adaptive_adjacency,
    estimate_degree,
    gumbel_softmax_sample,
    kl_standard_normal,
    score_edges,
)

KM_PER_DEG = 6371.0 * np.pi / 180.0
STRUCTURE_PREFIXES = ("score.", "deg.")
HEAD_FINE_PREFIX = "head.fine."


class ModelParams(OrderedDict):
    """Ordered ``name -> Tensor`` mapping of every learnable array."""

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self.items())

    @classmethod
    def from_arrays(cls, arrays):
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k))
                   for k, v in arrays.items())

    def copy(self):
        return ModelParams.from_arrays(self.arrays())

    def zero_grad(self):
        for v in self.values():
            v.grad = None

    def l2(self):
        total = None
        for v in self.values():
            term = ad.sum_(ad.square(v))
            total = term if total is None else total + term
        return total

    def sq_norm(self):
        return float(sum(np.sum(v.data ** 2) for v in self.values()))

    def n_scalars(self):
        return int(sum(v.data.size for v in self.values()))

    def structure_names(self):
        return [k for k in self if k.startswith(STRUCTURE_PREFIXES)]


def glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def input_width(cfg):
    return len(VARIABLES) + (2 if cfg.use_coords else 0)


def init_params(cfg, platforms: Sequence[str], seed=None) -> ModelParams:
    """Glorot-uniform weights, zero biases (degree bias starts at ``init_degree``)."""
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7])
    d = cfg.hidden
    C = len(VARIABLES)
    F = input_width(cfg)
    p = OrderedDict()

    def lin(name, fi, fo, bias=True):
        p[f"{name}.W"] = glorot(rng, fi, fo)
        if bias:
            p[f"{name}.b"] = np.zeros(fo)

    lin("proj.grid", F, d)
    for plat in platforms:
        lin(f"proj.obs.{plat}", F, d)
    hs = cfg.score_hidden
    out = hs if hs > 0 else 1
    p["score.Wc1"] = glorot(rng, d, d)
    p["score.Wc2"] = glorot(rng, d, d)
    p["score.Wd"] = glorot(rng, 1, cfg.dist_hidden)
    p["score.Pc1"] = glorot(rng, d, out)
    p["score.Pc2"] = glorot(rng, d, out)
    p["score.Pd"] = glorot(rng, cfg.dist_hidden, out)
    p["score.bp"] = np.zeros(out)
    if hs > 0:
        p["score.q"] = glorot(rng, hs, 1)
        p["score.bq"] = np.zeros(1)
    p["deg.Wmu"] = glorot(rng, d, d)
    p["deg.bmu"] = np.zeros(d)
    p["deg.Wsig"] = glorot(rng, d, d)
    p["deg.bsig"] = np.zeros(d)
    p["deg.Wk"] = glorot(rng, d + 1, 1)
    p["deg.bk"] = np.full(1, float(cfg.init_degree))
    for l in range(cfg.n_layers):
        p[f"gcn.W{l}"] = glorot(rng, d, d)
    p["readout.W"] = glorot(rng, d * (cfg.n_layers + 1), d)
    for g in ("z", "r", "n"):
        p[f"gru.W{g}"] = glorot(rng, d, d)
        p[f"gru.U{g}"] = glorot(rng, d, d)
        p[f"gru.b{g}"] = np.zeros(d)
    for head in ("fine", "pre_grid", "pre_obs"):
        p[f"head.{head}.W1"] = glorot(rng, d, d)
        p[f"head.{head}.b1"] = np.zeros(d)
        p[f"head.{head}.W2"] = glorot(rng, d, C)
        p[f"head.{head}.b2"] = np.zeros(C)
    return ModelParams.from_arrays(p)


def fresh_head(params: ModelParams, cfg, seed) -> ModelParams:
    """Replace the forecasting head with a newly initialised one."""
    new = init_params(cfg, platforms_of(params), seed=seed)
    out = params.copy()
    for k in out:
        if k.startswith(HEAD_FINE_PREFIX):
            out[k] = new[k]
    return out


def platforms_of(params) -> list:
    return [k.split(".")[2] for k in params if k.startswith("proj.obs.") and k.endswith(".W")]


@dataclass(eq=False)
class Batch:
    X: np.ndarray            # (S, n, F) inputs
    truth: np.ndarray        # (S, n, C) normalised features (masked channels 0)
    chan_mask: np.ndarray    # (S, n, C)
    valid: np.ndarray        # (S, n)
    node_type: np.ndarray    # (S, n)
    enc_masks: dict          # encoder name -> (S, n, 1)
    cand: np.ndarray         # (S, n, n) initial edges, zero diagonal
    dist: np.ndarray         # (S, n, n) km / radius on candidate pairs
    n_cand: np.ndarray       # (S, n)
    B: int
    m: int
    y_next: Optional[np.ndarray] = None
    y_cur: Optional[np.ndarray] = None
    label_t: list = field(default_factory=list)
    target_ids: list = field(default_factory=list)

    @property
    def S(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]


def make_batch(windows, platforms: Sequence[str], cfg) -> Batch:
    """Stack ``B`` windows of ``m`` subgraphs into padded ``(B*m, n, ...)`` arrays (window-major)."""
    B = len(windows)
    m = windows[0].m
    subs = [sg for w in windows for sg in w.snapshots]
    S = len(subs)
    n = max(sg.n for sg in subs)
    C = len(VARIABLES)
    F = input_width(cfg)
    X = np.zeros((S, n, F))
    truth = np.zeros((S, n, C))
    chan = np.zeros((S, n, C))
    valid = np.zeros((S, n), dtype=bool)
    ntype = np.full((S, n), -1, dtype=np.int8)
    cand = np.zeros((S, n, n))
    dist = np.zeros((S, n, n))
    enc = {"grid": np.zeros((S, n, 1))}
    for p in platforms:
        enc[p] = np.zeros((S, n, 1))
    for s, sg in enumerate(subs):
        k = sg.n
        f = np.where(sg.mask, sg.features, 0.0)
        X[s, :k, :C] = f
        if cfg.use_coords:
            lat0, lon0 = sg.coords[0]
            X[s, :k, C] = (sg.coords[:, 0] - lat0) * KM_PER_DEG / cfg.radius_km
            X[s, :k, C + 1] = ((sg.coords[:, 1] - lon0) * KM_PER_DEG * np.cos(np.radians(lat0))
                               / cfg.radius_km)
        truth[s, :k] = f
        chan[s, :k] = sg.mask
        valid[s, :k] = True
        ntype[s, :k] = sg.node_type
        for i in range(k):
            key = "grid" if sg.node_type[i] == GRID else sg.platform[i]
            if key not in enc:
                raise ValueError(f"no encoder for platform {key!r}")
            enc[key][s, i, 0] = 1.0
        if len(sg.edges):
            a, b = sg.edges[:, 0], sg.edges[:, 1]
            cand[s, a, b] = cand[s, b, a] = 1.0
            dist[s, a, b] = dist[s, b, a] = sg.edge_km / cfg.radius_km
    y_next = None
    if windows[0].target_next is not None:
        y_next = np.stack([w.target_next for w in windows])
    y_cur = np.stack([w.target_current for w in windows]) if windows[0].target_current is not None else None
    return Batch(X, truth, chan, valid, ntype, enc, cand, dist, cand.sum(-1).astype(int), B, m,
                 y_next, y_cur, [w.label_t for w in windows], [w.target_id for w in windows])


@dataclass(eq=False)
class ForwardOut:
    z: Tensor                       # (B, d) final target representation
    emb: Tensor
    adjacency: Optional[object]     # AdjacencySample or None
    layers: list
    target_states: list             # GRU states per step, each (B, d)
    kl: Optional[Tensor] = None
    readout_all: Optional[Tensor] = None


def project_batch(batch: Batch, params) -> Tensor:
    X = Tensor(batch.X)
    emb = None
    for key, mask in batch.enc_masks.items():
        if not mask.any():
            continue
        prefix = "proj.grid" if key == "grid" else f"proj.obs.{key}"
        term = (ad.matmul(X, params[f"{prefix}.W"]) + params[f"{prefix}.b"]) * mask
        emb = term if emb is None else emb + term
    return emb


def structure(batch: Batch, emb, params, cfg, noise, frozen=None):
    """Score candidates, sample, estimate degrees, and assemble the adaptive adjacency."""
    eye = np.eye(batch.n, dtype=bool)
    cand_self = (batch.cand > 0) | (eye & batch.valid[..., None])
    probs, logp = score_edges(emb, batch.dist, params, use_distance=cfg.use_distance, pairs=cand_self)
    e_hat = gumbel_softmax_sample(probs, cfg.tau, noise, mask=cand_self, log_p=logp)
    k, K, mu, sigma = estimate_degree(emb, e_hat, params, noise, batch.n_cand, return_stats=True)
    sample = build_adaptive_adjacency(e_hat, K, batch.cand > 0, k=k, symmetrize=cfg.symmetrize,
                                      mode=cfg.adjacency_mode, frozen=frozen, probs=probs)
    kl = kl_standard_normal(mu, sigma) if cfg.kl_weight > 0 else None
    return sample, kl


def gru_cell(params):
    return {k: params[f"gru.{k}"] for k in GRU_KEYS}


def spatial_encode(params, batch: Batch, cfg, noise, frozen=None, all_rows=False):
    """Per-subgraph readouts: ``(S, d)`` target rows, or ``(S, n, d)`` with ``all_rows``."""
    emb = project_batch(batch, params)
    sample, kl = None, None
    if cfg.structure == "fixed":
        A_norm = Tensor(normalize_adjacency_np(batch.cand))
    else:
        sample, kl = structure(batch, emb, params, cfg, noise, frozen)
        A_norm = normalize_adjacency(sample.adj, check=cfg.symmetrize)
    weights = [params[f"gcn.W{l}"] for l in range(cfg.n_layers)]
    layers = gcn_forward(emb, A_norm, weights)
    rows = layers if all_rows else [ad.getitem(L, (slice(None), 0)) for L in layers]
    h = skip_readout(rows, params["readout.W"])
    return h, emb, sample, layers, kl


def temporal_encode(params, h_target, B, m):
    """GRU over ``m`` target readouts per window; ``h_target`` is ``(B*m, d)`` window-major."""
    seq3 = ad.reshape(h_target, (B, m, h_target.shape[-1]))
    seq = [ad.getitem(seq3, (slice(None), s)) for s in range(m)]
    return gru_aggregate(seq, gru_cell(params), return_all=True)


def forward(params, batch: Batch, cfg, noise, frozen=None, all_rows=False) -> ForwardOut:
    h, emb, sample, layers, kl = spatial_encode(params, batch, cfg, noise, frozen, all_rows)
    h_t = ad.getitem(h, (slice(None), 0)) if all_rows else h
    z, states = temporal_encode(params, h_t, batch.B, batch.m)
    return ForwardOut(z, emb, sample, layers, states, kl, h if all_rows else None)


def predict_next(params, out: ForwardOut):
    return mlp(out.z, params, "head.fine")


def finetune_data_loss(params, batch: Batch, out: ForwardOut):
    if batch.y_next is None:
        raise ValueError("finetune loss needs target_next labels")
    pred = predict_next(params, out)
    return ad.mean(ad.abs_(pred - batch.y_next))


def pretrain_data_loss(params, batch: Batch, out: ForwardOut, cfg):
    """Masked L1 reconstruction of every node at every step of the window.

    The target row uses its running GRU state; every other row uses a single
    GRU step over its own readout (observations exist at one step only).
    """
    h = out.readout_all
    z1 = gru_step(h, Tensor(np.zeros(h.shape)), gru_cell(params))
    tgt = ad.reshape(ad.stack(out.target_states, axis=1), (batch.S, 1, h.shape[-1]))
    is_t = np.zeros((1, batch.n, 1))
    is_t[0, 0, 0] = 1.0
    z = z1 * (1.0 - is_t) + tgt * is_t
    grid = (batch.node_type == GRID)[..., None].astype(float)
    obs = (batch.node_type == OBS)[..., None].astype(float)
    pred = mlp(z, params, "head.pre_grid") * grid + mlp(z, params, "head.pre_obs") * obs
    err = ad.abs_(pred - batch.truth) * batch.chan_mask
    nchan = batch.chan_mask.sum(-1)
    per_node = ad.sum_(err, axis=-1) / np.maximum(nchan, 1.0)
    node_ok = (nchan > 0) & batch.valid
    per_win = ad.reshape(ad.sum_(per_node * node_ok, axis=-1), (batch.B, batch.m))
    counts = node_ok.sum(-1).reshape(batch.B, batch.m).sum(-1)
    return ad.mean(ad.sum_(per_win, axis=-1) / np.maximum(counts, 1))


def total_loss(params, batch, cfg, noise, frozen=None):
    """Data term + ``lam * ||theta||^2`` (+ optional KL on the degree encoder)."""
    out = forward(params, batch, cfg, noise, frozen=frozen, all_rows=cfg.phase == "pretrain")
    if cfg.phase == "pretrain":
        data = pretrain_data_loss(params, batch, out, cfg)
    else:
        data = finetune_data_loss(params, batch, out)
    loss = data
    if cfg.lam:
        loss = loss + params.l2() * cfg.lam
    if out.kl is not None:
        loss = loss + ad.mean(out.kl) * cfg.kl_weight
    return loss, data, out
