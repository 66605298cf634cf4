"""Differentiable edge scoring, Gumbel-Softmax sampling and adaptive node degrees.

All functions accept arbitrary leading batch dimensions: node tensors are
``(..., n, d)`` and pair tensors ``(..., n, n)``. Row ``i`` of a pair tensor
holds node ``i``'s scores over candidate neighbours ``j``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# per-op invocation counts; ablation tests assert the fixed-graph path never scores edges
CALLS = Counter()


class NoiseSource:
    """Seeded Gumbel / Gaussian draws."""

    def __init__(self, seed=None):
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def gumbel(self, shape):
        return self.rng.gumbel(0.0, 1.0, size=shape)

    def normal(self, shape):
        return self.rng.standard_normal(size=shape)


class ZeroNoise:
    """Noise-free evaluation: g = 0 and eps = 0."""

    def gumbel(self, shape):
        return np.zeros(shape)

    def normal(self, shape):
        return np.zeros(shape)


class FrozenNoise:
    """Records draws from ``source`` on first use and replays them in call order after ``rewind``."""

    def __init__(self, source):
        self.source = source
        self.tape = []
        self.pos = 0

    def _draw(self, kind, shape):
        if self.pos < len(self.tape):
            k, arr = self.tape[self.pos]
            if k != kind or arr.shape != tuple(shape):
                raise RuntimeError("replay diverged from recorded noise tape")
        else:
            arr = getattr(self.source, kind)(shape)
            self.tape.append((kind, arr))
        self.pos += 1
        return arr

    def gumbel(self, shape):
        return self._draw("gumbel", shape)

    def normal(self, shape):
        return self._draw("normal", shape)

    def rewind(self):
        self.pos = 0
        return self


@dataclass(eq=False)
class EmbeddingBatch:
    emb: Tensor             # (..., n, d')
    node_type: np.ndarray   # (..., n) 0 grid / 1 obs


@dataclass(eq=False)
class AdjacencySample:
    probs: Tensor            # p_ij over candidate pairs
    soft: Tensor             # Gumbel-Softmax rows e_hat
    degree: Tensor           # continuous k_i
    K: np.ndarray            # integer degrees
    hard: np.ndarray         # 0/1 adjacency, zero diagonal
    adj: Tensor              # value used downstream (hard forward, soft backward in "st" mode)
    rank: np.ndarray
    surrogate: Tensor        # relaxed symmetric adjacency that carries the gradient


def affine(x, W, b=None):
    out = ad.matmul(x, W)
    return out if b is None else out + b


def project_features(grid_feats, obs_feats, params, prefix="proj"):
    """Map grid rows and per-platform observation rows to a shared width.

    ``obs_feats`` maps platform -> ``(features, mask)``; masked channels are
    zeroed before the affine map. Rows come back grid first, then platforms
    in ``obs_feats`` order.
    """
    CALLS["project_features"] += 1
    rows, types = [], []
    W, b = params[f"{prefix}.grid.W"], params[f"{prefix}.grid.b"]
    g = np.asarray(grid_feats, dtype=float)
    if g.size:
        if g.shape[-1] != W.shape[0]:
            raise ValueError(f"grid feature width {g.shape[-1]} != encoder width {W.shape[0]}")
        rows.append(affine(Tensor(g), W, b))
        types += [0] * g.shape[0]
    for plat, (f, mask) in obs_feats.items():
        key = f"{prefix}.obs.{plat}.W"
        if key not in params:
            raise ValueError(f"no encoder for platform {plat!r}")
        f = np.where(np.asarray(mask, dtype=bool), np.asarray(f, dtype=float), 0.0)
        if f.shape[-1] != params[key].shape[0]:
            raise ValueError(f"platform {plat!r}: feature width {f.shape[-1]} != encoder width {params[key].shape[0]}")
        rows.append(affine(Tensor(f), params[key], params[f"{prefix}.obs.{plat}.b"]))
        types += [1] * f.shape[0]
    emb = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    return EmbeddingBatch(emb, np.array(types, dtype=np.int8))


def score_edges(emb, dist, params, use_distance=True, pairs=None):
    """Edge probabilities ``p_ij`` and ``log p_ij``.

    ``c_ij = sigmoid(W_c1 x_i || W_c2 x_j)``, ``d_ij = sigmoid(W_d dist_ij)``,
    ``p_ij = sigmoid(FC_p(c_ij || d_ij))``. ``FC_p`` is a one-hidden-layer
    ReLU MLP when ``score.q`` is present, otherwise a single linear map.
    With a boolean ``pairs`` mask only those entries are scored; the rest
    get logit 0 (``p = 0.5``) and should be masked out downstream.
    """
    CALLS["score_edges"] += 1
    emb = ad.as_tensor(emb)
    dist = np.asarray(dist, dtype=float)
    ci = ad.sigmoid(ad.matmul(emb, params["score.Wc1"]))
    cj = ad.sigmoid(ad.matmul(emb, params["score.Wc2"]))
    ui = ad.matmul(ci, params["score.Pc1"])          # (..., n, h)
    uj = ad.matmul(cj, params["score.Pc2"])
    lead = emb.shape[:-2]
    n = emb.shape[-2]
    h = ui.shape[-1]
    if pairs is None:
        pre = ad.reshape(ui, lead + (n, 1, h)) + ad.reshape(uj, lead + (1, n, h)) + params["score.bp"]
        dsel = dist[..., None]
    else:
        idx = np.nonzero(np.broadcast_to(np.asarray(pairs, dtype=bool), lead + (n, n)))
        pre = ad.getitem(ui, idx[:-1]) + ad.getitem(uj, idx[:-2] + idx[-1:]) + params["score.bp"]
        dsel = dist[idx][:, None]
    if use_distance:
        dd = ad.sigmoid(Tensor(dsel) * ad.reshape(params["score.Wd"], (-1,)))
        pre = pre + ad.matmul(dd, params["score.Pd"])
    if "score.q" in params:
        logit = ad.matmul(ad.relu(pre), params["score.q"]) + params["score.bq"]
    else:
        logit = pre
    if pairs is None:
        logit = ad.reshape(logit, lead + (n, n))
    else:
        logit = ad.scatter(ad.reshape(logit, (-1,)), idx, lead + (n, n))
    return ad.sigmoid(logit), ad.log_sigmoid(logit)


def gumbel_softmax_sample(p, tau, noise, mask=None, log_p=None):
    """``softmax((log p + g) / tau)`` over the last axis, restricted to ``mask``.

    ``noise`` is a noise source (``.gumbel(shape)``) or an explicit array of
    Gumbel(0, 1) draws.
    """
    CALLS["gumbel_softmax_sample"] += 1
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if log_p is None:
        log_p = ad.log(ad.as_tensor(p))
    shape = log_p.shape
    g = noise.gumbel(shape) if hasattr(noise, "gumbel") else np.broadcast_to(np.asarray(noise, float), shape)
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    return ad.masked_softmax((log_p + g) * (1.0 / tau), mask, axis=-1)


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def clamp_degree(k, n_candidates):
    """Integer degree: round half away from zero, then clamp to [1, n_candidates]."""
    K = round_half_away(k).astype(np.int64)
    n_candidates = np.asarray(n_candidates)
    return np.where(n_candidates > 0, np.clip(K, 1, np.maximum(n_candidates, 1)), 0)


def estimate_degree(emb, e_hat, params, noise, n_candidates, return_stats=False):
    """Continuous degree ``k_i = FC_k(z_i || sum_j e_hat_ij)`` with ``z = mu + eps * sigma``."""
    CALLS["estimate_degree"] += 1
    emb = ad.as_tensor(emb)
    mu = affine(emb, params["deg.Wmu"], params["deg.bmu"])
    sigma = ad.softplus(affine(emb, params["deg.Wsig"], params["deg.bsig"]))
    eps = noise.normal(mu.shape) if hasattr(noise, "normal") else np.asarray(noise, float)
    z = mu + sigma * eps
    l1 = ad.reshape(ad.sum_(ad.abs_(e_hat), axis=-1), e_hat.shape[:-1] + (1,))
    k = affine(ad.concat([z, l1], axis=-1), params["deg.Wk"], params["deg.bk"])
    k = ad.reshape(k, k.shape[:-1])
    K = clamp_degree(k.data, n_candidates)
    ad.note_branch(K)
    if return_stats:
        return k, K, mu, sigma
    return k, K


def rank_candidates(e_hat, offdiag):
    """1-based rank of each candidate within its row (descending, ties to lower index)."""
    vals = np.where(offdiag, np.asarray(e_hat, float), -np.inf)
    order = np.argsort(-vals, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(1, vals.shape[-1] + 1), axis=-1)
    return np.where(offdiag, rank, 0)


def _transpose(x):
    return ad.swapaxes(x, -1, -2)


def build_adaptive_adjacency(e_hat, K, offdiag, k=None, symmetrize=True, mode="st", frozen=None, probs=None):
    """Keep each node's top-``K_i`` candidates by ``e_hat`` and assemble ``A_hat``.

    ``offdiag`` marks the candidate pairs (initial edges, no diagonal).
    The relaxed surrogate ``R_ij = e_hat_ij * sigmoid(k_i - rank_ij + 1/2)``
    (OR-symmetrised as ``1 - (1-R)(1-R^T)``) carries the gradient:
    ``mode="st"`` forwards the hard matrix with the surrogate's gradient,
    ``"relaxed"`` forwards the surrogate itself, ``"hard"`` is constant.
    ``frozen`` = (hard, rank, surrogate value) replays an earlier selection.
    """
    CALLS["build_adaptive_adjacency"] += 1
    e_hat = ad.as_tensor(e_hat)
    offdiag = np.asarray(offdiag, dtype=bool)
    if frozen is None:
        rank = rank_candidates(e_hat.data, offdiag)
        Kb = np.asarray(K)[..., None]
        directed = offdiag & (rank >= 1) & (rank <= Kb)
        hard = (directed | np.swapaxes(directed, -1, -2)) if symmetrize else directed
        hard = hard.astype(float)
        ad.note_branch(rank)
        ad.note_branch(hard)
    else:
        hard, rank, _ = frozen
    R = e_hat * offdiag
    if k is not None:
        kk = ad.reshape(ad.as_tensor(k), k.shape + (1,))
        R = R * ad.sigmoid(kk - rank + 0.5)
    if symmetrize:
        R = 1.0 - (1.0 - R) * (1.0 - _transpose(R))
    if mode == "relaxed":
        adj = R
    elif mode == "hard":
        adj = Tensor(hard)
    elif mode == "st":
        anchor = R.data if frozen is None else frozen[2]
        adj = (R - Tensor(anchor)) + hard
    else:
        raise ValueError(f"unknown adjacency mode {mode!r}")
    return AdjacencySample(probs=probs, soft=e_hat, degree=k, K=np.asarray(K), hard=hard, adj=adj,
                           rank=rank, surrogate=R)


def kl_standard_normal(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the last axis."""
    s2 = sigma * sigma
    return ad.sum_((mu * mu + s2 - 1.0 - ad.log(s2 + 1e-12)) * 0.5, axis=-1)
