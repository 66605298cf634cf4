"""Spatial GCN with skip readout and GRU temporal aggregation.

Propagation is ``H' = relu(A_norm @ H @ W)`` over the node axis; every op is
built from :mod:`asgn.autodiff` so gradients come for free.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def normalize_adjacency(A, check=True, atol=1e-12):
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``.

    Accepts a 0/1 (or non-negative weighted) matrix with zero diagonal,
    batched over leading axes. Differentiable in ``A``.
    """
    A = ad.as_tensor(A)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if check:
        if not np.allclose(A.data, np.swapaxes(A.data, -1, -2), atol=atol, rtol=0, equal_nan=True):
            raise ValueError("adjacency is not symmetric")
        if np.any(np.abs(np.diagonal(A.data, axis1=-2, axis2=-1)) > atol):
            raise ValueError("adjacency diagonal must be zero; self-loops are added here")
    n = A.shape[-1]
    Ahat = A + np.eye(n)
    deg = ad.sum_(Ahat, axis=-1)
    dinv = 1.0 / ad.sqrt(deg)
    lead = A.shape[:-2]
    return Ahat * ad.reshape(dinv, lead + (n, 1)) * ad.reshape(dinv, lead + (1, n))


def normalize_adjacency_np(A):
    """Plain numpy twin for constant graphs."""
    A = np.asarray(A, dtype=float)
    Ahat = A + np.eye(A.shape[-1])
    dinv = 1.0 / np.sqrt(Ahat.sum(-1))
    return Ahat * dinv[..., :, None] * dinv[..., None, :]


def gcn_forward(H0, A_norm, weights, activation=ad.relu):
    """Return ``[H0, H1, ..., HL]`` for ``L = len(weights)`` layers."""
    H = ad.as_tensor(H0)
    A_norm = ad.as_tensor(A_norm)
    if H.shape[-2] != A_norm.shape[-1]:
        raise ValueError(f"{H.shape[-2]} node rows but adjacency is {A_norm.shape[-2:]}")
    out = [H]
    for W in weights:
        if H.shape[-1] != W.shape[0]:
            raise ValueError(f"layer input width {H.shape[-1]} != weight rows {W.shape[0]}")
        H = activation(ad.matmul(ad.matmul(A_norm, H), W))
        out.append(H)
    return out


def skip_readout(layers, W_r):
    """``W_r (h^0 || h^1 || ... || h^L)`` applied row-wise."""
    cat = ad.concat(list(layers), axis=-1) if len(layers) > 1 else ad.as_tensor(layers[0])
    return ad.matmul(cat, W_r)


GRU_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")


def gru_step(x, h, cell):
    """One GRU step.

    ``u = sig(x Wz + h Uz + bz)``, ``r = sig(x Wr + h Ur + br)``,
    ``n = tanh(x Wn + r * (h Un) + bn)``, ``h' = (1 - u) * n + u * h``.
    """
    u = ad.sigmoid(ad.matmul(x, cell["Wz"]) + ad.matmul(h, cell["Uz"]) + cell["bz"])
    r = ad.sigmoid(ad.matmul(x, cell["Wr"]) + ad.matmul(h, cell["Ur"]) + cell["br"])
    n = ad.tanh(ad.matmul(x, cell["Wn"]) + r * ad.matmul(h, cell["Un"]) + cell["bn"])
    return (1.0 - u) * n + u * h


def gru_aggregate(seq, cell, return_all=False):
    """Run the cell over ``seq`` (list of ``(..., in)`` tensors) from a zero state."""
    if len(seq) == 0:
        raise ValueError("GRU needs a non-empty sequence")
    first = ad.as_tensor(seq[0])
    hidden = cell["Uz"].shape[0]
    h = Tensor(np.zeros(first.shape[:-1] + (hidden,)))
    states = []
    for x in seq:
        h = gru_step(ad.as_tensor(x), h, cell)
        states.append(h)
    return (h, states) if return_all else h


def mlp(x, params, prefix):
    """Two-layer head ``relu(x W1 + b1) W2 + b2``."""
    h = ad.relu(ad.matmul(x, params[f"{prefix}.W1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.W2"]) + params[f"{prefix}.b2"]
