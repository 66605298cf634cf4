"""Two-phase optimisation (reconstruction pretraining, forecasting fine-tuning) and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .datamodel import VARIABLES
from .graphbuild import WindowSampler
from .model import ModelParams, fresh_head, init_params, make_batch, total_loss
from .structlearn import NoiseSource, ZeroNoise
from .synthgen import ConfigError

log = logging.getLogger(__name__)

MAGIC = b"ASGN"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimisers

class SGD:
    def __init__(self, lr):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            params[k].data = params[k].data - self.lr * g

    def state(self):
        return {"t": self.t, "lr": self.lr}, {}

    def load(self, meta, arrays):
        self.t = int(meta.get("t", 0))
        self.lr = float(meta.get("lr", self.lr))


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k].data = params[k].data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        arrays = OrderedDict()
        for k in self.m:
            arrays[f"adam.m.{k}"] = self.m[k]
            arrays[f"adam.v.{k}"] = self.v[k]
        return {"t": self.t, "lr": self.lr}, arrays

    def load(self, meta, arrays):
        self.t = int(meta.get("t", 0))
        self.lr = float(meta.get("lr", self.lr))
        for name, arr in arrays.items():
            kind, key = name.split(".", 2)[1], name.split(".", 2)[2]
            (self.m if kind == "m" else self.v)[key] = np.array(arr, dtype=np.float64)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------- checkpoint

@dataclass(eq=False)
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    config: dict
    epoch: int = 0
    optimizer: dict = field(default_factory=dict)
    optimizer_arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.params)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def _tensor_entries(group, arrays):
    return [{"name": k, "group": group, "shape": list(np.shape(v))} for k, v in arrays.items()]


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    header = {
        "config": ck.config,
        "epoch": int(ck.epoch),
        "optimizer": ck.optimizer,
        "rng_state": ck.rng_state,
        "meta": ck.meta,
        "tensors": _tensor_entries("params", ck.params) + _tensor_entries("optimizer", ck.optimizer_arrays),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for arrays in (ck.params, ck.optimizer_arrays):
        for v in arrays.values():
            buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ck))
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    off = 12 + hlen
    params, opt = OrderedDict(), OrderedDict()
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t["shape"]).astype(np.float32)
        off += 4 * n
        (params if t["group"] == "params" else opt)[t["name"]] = arr
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after tensor payload")
    return Checkpoint(params, header["config"], header["epoch"], header["optimizer"], opt,
                      header["rng_state"], header["meta"])


# ---------------------------------------------------------------- training

@dataclass(eq=False)
class FitResult:
    params: ModelParams
    history: list            # (epoch, train_l1, val_l1)
    checkpoint: Checkpoint
    diverged: bool = False
    best_epoch: int = 0


def _window_pairs(sampler, targets, split):
    return [(g, lt) for lt in sampler.label_steps(split) for g in targets]


def validation_pairs(sampler, targets, cfg):
    """Fixed validation subset: whole val-split series for a seeded subset of targets."""
    steps = sampler.label_steps("val")
    if not steps:
        return []
    n_t = max(1, min(len(targets), cfg.val_windows // len(steps)))
    rng = np.random.default_rng([cfg.seed, 11])
    chosen = sorted(rng.choice(list(targets), n_t, replace=False).tolist())
    return [(g, lt) for lt in steps for g in chosen]


def make_checkpoint(params, cfg, epoch, opt, rng, meta) -> Checkpoint:
    ometa, oarr = opt.state()
    return Checkpoint(
        OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in params.arrays().items()),
        cfg.to_dict(), epoch, ometa, OrderedDict((k, v.astype(np.float32)) for k, v in oarr.items()),
        rng.bit_generator.state, meta)


def forecast(params, sampler, pairs, platforms, cfg, chunk=256):
    """Noise-free normalised forecasts for ``(target, label_step)`` pairs, shape ``(N, C)``.

    With noise off a subgraph's readout does not depend on the window it sits
    in, so each (target, step) readout is computed once and shared.
    """
    from . import autodiff as ad
    from .datamodel import SubgraphWindow
    from .encoder import mlp
    from .model import spatial_encode, temporal_encode

    m = sampler.m
    need = sorted({(g, s) for g, lt in pairs for s in range(lt - m, lt)}, key=lambda x: (x[1], x[0]))
    cache = {}
    for i in range(0, len(need), chunk):
        keys = need[i:i + chunk]
        wins = [SubgraphWindow(g, (sampler.subgraph(g, s),)) for g, s in keys]
        h, *_ = spatial_encode(params, make_batch(wins, platforms, cfg), cfg, ZeroNoise())
        for key, row in zip(keys, h.data):
            cache[key] = row
    preds = []
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        H = np.stack([cache[(g, s)] for g, lt in part for s in range(lt - m, lt)])
        z, _ = temporal_encode(params, ad.Tensor(H), len(part), m)
        preds.append(mlp(z, params, "head.fine").data)
    return np.concatenate(preds) if preds else np.zeros((0, len(VARIABLES)))


def evaluate_loss(params, sampler, pairs, platforms, cfg, batch_size=64):
    """Mean data loss over ``pairs`` with noise switched off."""
    if not pairs:
        return float("nan")
    if cfg.phase == "finetune":
        pred = forecast(params, sampler, pairs, platforms, cfg)
        truth = np.stack([sampler.snapshot(lt).index[g].features for g, lt in pairs])
        return float(np.mean(np.abs(pred - truth)))
    total, count = 0.0, 0
    pretrain = cfg.phase == "pretrain"
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        wins = [sampler.window(g, lt, pretrain=pretrain) for g, lt in chunk]
        batch = make_batch(wins, platforms, cfg)
        _, data, _ = total_loss(params, batch, cfg, ZeroNoise())
        total += float(data.data) * len(chunk)
        count += len(chunk)
    return total / count


def fit(dataset, cfg: TrainConfig, init: Optional[Checkpoint] = None, targets=None,
        sampler: Optional[WindowSampler] = None, callback=None) -> FitResult:
    """Train one phase; deterministic given ``cfg.seed``.

    ``init`` (a pretraining checkpoint) seeds every tensor except the
    forecasting head, which is re-initialised when fine-tuning.
    """
    cfg.validate()
    sampler = sampler or WindowSampler(dataset, cfg.m, cfg.k, cfg.radius_km, cfg.obs_obs)
    if (sampler.m, sampler.k, sampler.radius_km) != (cfg.m, cfg.k, cfg.radius_km):
        raise ConfigError("sampler settings differ from the training config")
    platforms = dataset.platforms()
    if targets is None:
        targets = dataset.grid_ids
    pairs = _window_pairs(sampler, targets, "train")
    if not pairs:
        raise ConfigError("no training windows: train split shorter than the window")
    val_pairs = validation_pairs(sampler, targets, cfg)

    if init is not None:
        params = init.model_params()
        if cfg.phase == "finetune" and init.config.get("phase") == "pretrain":
            params = fresh_head(params, cfg, seed=cfg.seed + 1000)
    else:
        params = init_params(cfg, platforms)
    frozen = set(params.structure_names()) if cfg.freeze_structure else set()
    opt = make_optimizer(cfg)
    rng = np.random.default_rng([cfg.seed, 13])
    noise = NoiseSource(np.random.default_rng([cfg.seed, 17]))
    pretrain = cfg.phase == "pretrain"
    meta = {"platforms": platforms, "phase": cfg.phase}

    history = []
    best = (float("inf"), params.copy(), 0)
    stale = 0
    last_good = params.copy()
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        n = min(cfg.windows_per_epoch, len(pairs)) if cfg.windows_per_epoch else len(pairs)
        order = rng.permutation(len(pairs))[:n]
        losses = []
        for i in range(0, n, cfg.batch_size):
            chunk = [pairs[j] for j in order[i:i + cfg.batch_size]]
            batch = make_batch([sampler.window(g, lt, pretrain=pretrain) for g, lt in chunk], platforms, cfg)
            params.zero_grad()
            loss, data, _ = total_loss(params, batch, cfg, noise)
            if not np.isfinite(loss.data):
                diverged = True
                break
            loss.backward()
            grads = OrderedDict((k, v.grad if v.grad is not None else np.zeros_like(v.data))
                                for k, v in params.items() if k not in frozen)
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads)
            if not all(np.all(np.isfinite(v.data)) for v in params.values()):
                diverged = True
                break
            losses.append(float(data.data))
        if diverged:
            log.warning("non-finite loss in epoch %d; keeping last finite parameters", epoch)
            params = last_good
            break
        last_good = params.copy()
        opt.lr *= cfg.lr_decay
        train_l1 = float(np.mean(losses)) if losses else float("nan")
        val_l1 = evaluate_loss(params, sampler, val_pairs, platforms, cfg)
        history.append((epoch, train_l1, val_l1))
        log.info("epoch %d train %.5f val %.5f", epoch, train_l1, val_l1)
        if callback is not None:
            callback(epoch, params)
        if np.isfinite(val_l1):
            if val_l1 < best[0]:
                best, stale = (val_l1, params.copy(), epoch), 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best[2])
                    break
    final, best_epoch = params, len(history)
    if np.isfinite(best[0]) and not diverged:
        final, best_epoch = best[1], best[2]
    ck = make_checkpoint(final, cfg, best_epoch, opt, rng, meta)
    return FitResult(ck.model_params(), history, ck, diverged, best_epoch)


def write_losses_csv(history, path):
    lines = ["epoch,train,val"]
    for e, tr, va in history:
        lines.append(f"{e},{tr!r},{va!r}")
    Path(path).write_text("\n".join(lines) + "\n")
