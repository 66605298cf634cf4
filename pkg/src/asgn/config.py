"""Training / evaluation configuration and the merged run configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .synthgen import ConfigError, SimConfig

# forecasting protocol defaults
WINDOW = 8
KHOP = 3
RADIUS_KM = 50.0
SPLIT = (0.6, 0.2, 0.2)
TAU = 0.5
HIDDEN = 32


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"           # "pretrain" | "finetune"
    epochs: int = 60
    lr: float = 3e-3
    lr_decay: float = 0.97            # learning rate multiplier applied after every epoch
    lam: float = 1e-6                 # L2 weight on all parameters
    tau: float = TAU
    hidden: int = HIDDEN
    m: int = WINDOW
    k: int = KHOP
    radius_km: float = RADIUS_KM
    obs_obs: bool = True
    batch_size: int = 16
    windows_per_epoch: int = 256
    val_windows: int = 256
    seed: int = 0
    optimizer: str = "adam"           # "adam" | "sgd"
    clip_norm: float = 5.0
    patience: int = 12
    structure: str = "adaptive"       # "adaptive" | "fixed"
    use_distance: bool = True
    use_coords: bool = True
    n_layers: int = 3
    score_hidden: int = 16
    dist_hidden: int = 8
    symmetrize: bool = True
    adjacency_mode: str = "st"        # "st" | "relaxed" | "hard"
    init_degree: float = 3.0
    kl_weight: float = 0.0
    freeze_structure: bool = False

    def validate(self):
        bad = []
        if self.phase not in ("pretrain", "finetune"):
            bad.append("phase")
        if self.lam < 0:
            bad.append("lam")
        if not self.tau > 0:
            bad.append("tau")
        if self.m < 1:
            bad.append("m")
        if self.k < 0:
            bad.append("k")
        if self.hidden < 1:
            bad.append("hidden")
        if self.radius_km <= 0:
            bad.append("radius_km")
        if self.lr < 0:
            bad.append("lr")
        if not 0 < self.lr_decay <= 1:
            bad.append("lr_decay")
        if self.epochs < 0:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.optimizer not in ("adam", "sgd"):
            bad.append("optimizer")
        if self.structure not in ("adaptive", "fixed"):
            bad.append("structure")
        if self.adjacency_mode not in ("st", "relaxed", "hard"):
            bad.append("adjacency_mode")
        if self.n_layers < 0:
            bad.append("n_layers")
        if bad:
            raise ConfigError("invalid training parameters: " + ", ".join(bad))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _reject(cls, d, "train")
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class EvalConfig:
    vi_length: int = 24
    vi_variable: str = "T"
    seeds: tuple = (0, 1, 2)
    tau_grid: tuple = (0.1, 0.3, 0.5, 1.0, 2.0)
    hidden_grid: tuple = (8, 16, 32, 64, 128)
    svg: bool = False

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        _reject(cls, d, "eval")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def _reject(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    name: str = "run"

    def to_dict(self):
        return {"name": self.name, "sim": self.sim.to_dict(), "train": self.train.to_dict(),
                "eval": self.eval.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = sorted(set(d) - {"name", "sim", "train", "eval"})
        if unknown:
            raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
        return cls(
            sim=SimConfig.from_dict(d.get("sim", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            eval=EvalConfig.from_dict(d.get("eval", {})),
            name=d.get("name", "run"),
        )

    def validate(self):
        self.sim.validate()
        self.train.validate()
        return self


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
