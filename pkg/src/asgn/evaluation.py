"""Forecast metrics, variability stratification, ablation matrix and sensitivity sweeps."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import EvalConfig, TrainConfig
from .datamodel import VARIABLES
from .graphbuild import WindowSampler
from .training import fit, forecast

log = logging.getLogger(__name__)

GROUPS = ("low", "none", "high")
ABLATION_VARIANTS = (
    ("full", True, True),
    ("no-dist", True, False),
    ("fixed", False, None),
)
# reference optimum, drawn as an annotation on sweep plots (never asserted)
REFERENCE_OPTIMUM = {"tau": 0.5, "hidden": 32}


@dataclass
class MetricsReport:
    variables: tuple
    rmse: list
    mae: list
    r2: list                       # None where the truth has zero variance
    n: int
    node_ids: list = field(default_factory=list)
    node_mae: Optional[np.ndarray] = None     # (nodes, C) mean |residual| per node
    vi: Optional[np.ndarray] = None           # (nodes,) stratifying variability index
    groups: list = field(default_factory=list)
    group_mae: dict = field(default_factory=dict)   # group -> per-variable MAE
    group_size: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "variables": list(self.variables),
            "n": int(self.n),
            "rmse": dict(zip(self.variables, map(float, self.rmse))),
            "mae": dict(zip(self.variables, map(float, self.mae))),
            "r2": dict(zip(self.variables, [None if v is None else float(v) for v in self.r2])),
        }
        if self.group_mae:
            d["stratified"] = {
                g: {"count": int(self.group_size[g]),
                    "mae": dict(zip(self.variables, map(float, self.group_mae[g])))}
                for g in GROUPS
            }
        return d

    def mean_r2(self):
        vals = [v for v in self.r2 if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def vi_gap(self, variable=None):
        """MAE(high) - MAE(low), per variable or for one variable."""
        gap = np.asarray(self.group_mae["high"]) - np.asarray(self.group_mae["low"])
        return gap if variable is None else float(gap[self.variables.index(variable)])


def metrics(pred, truth, variables: Sequence[str] = VARIABLES) -> MetricsReport:
    """Per-variable RMSE, MAE and R^2 over rows of ``(N, C)`` arrays."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    if len(variables) != pred.shape[1]:
        variables = tuple(f"v{i}" for i in range(pred.shape[1]))
    if pred.shape[0] == 0:
        raise ValueError("no rows to score")
    res = pred - truth
    rmse = np.sqrt(np.mean(res ** 2, axis=0))
    mae = np.mean(np.abs(res), axis=0)
    ss_res = np.sum(res ** 2, axis=0)
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    r2 = [None if t == 0 else float(1.0 - r / t) for r, t in zip(ss_res, ss_tot)]
    return MetricsReport(tuple(variables), rmse.tolist(), mae.tolist(), r2, pred.shape[0])


def variability_index(series, length: int = 24):
    """Population std of the last ``length`` values (along axis 0)."""
    series = np.asarray(series, dtype=float)
    if series.shape[0] < length:
        raise ValueError(f"variability index needs {length} steps, got {series.shape[0]}")
    return np.std(series[series.shape[0] - length:], axis=0)


def stratify_nodes(vi, ids=None) -> list:
    """Label the bottom / top ``floor(n/4)`` nodes by VI as low / high, the rest none.

    Ties are broken by node id, so the counts are exact even for equal VIs.
    """
    vi = np.asarray(vi, dtype=float)
    n = len(vi)
    if n < 4:
        raise ValueError(f"stratification needs at least 4 nodes, got {n}")
    ids = list(range(n)) if ids is None else list(ids)
    q = n // 4
    order = sorted(range(n), key=lambda i: (vi[i], ids[i]))
    labels = ["none"] * n
    for i in order[:q]:
        labels[i] = "low"
    for i in order[n - q:]:
        labels[i] = "high"
    return labels


def stratified_mae(node_abs_err, labels, weights=None):
    """Group MAEs from per-node mean absolute errors ``(nodes, C)``.

    ``weights`` (rows per node) make the size-weighted group means decompose
    the overall MAE exactly; equal weights are assumed when omitted.
    """
    err = np.asarray(node_abs_err, dtype=float)
    w = np.ones(len(err)) if weights is None else np.asarray(weights, dtype=float)
    labels = np.asarray(labels)
    out, size = {}, {}
    for g in GROUPS:
        sel = labels == g
        size[g] = int(sel.sum())
        if size[g]:
            out[g] = (err[sel] * w[sel, None]).sum(0) / w[sel].sum()
        else:
            out[g] = np.full(err.shape[1], np.nan)
    return out, size


# ---------------------------------------------------------------- split forecasts

def split_pairs(sampler: WindowSampler, split: str, targets=None):
    targets = sampler.dataset.grid_ids if targets is None else targets
    return [(g, lt) for lt in sampler.label_steps(split) for g in targets]


def split_truth(sampler, pairs, offset=0):
    """Normalised grid features at ``label_step + offset`` for each pair."""
    return np.stack([sampler.snapshot(lt + offset).index[g].features for g, lt in pairs])


def model_predictions(params, dataset, cfg: TrainConfig, split="test", sampler=None):
    """``(pairs, pred, truth)`` in physical units for every grid node and label step of ``split``."""
    sampler = sampler or WindowSampler(dataset, cfg.m, cfg.k, cfg.radius_km, cfg.obs_obs)
    pairs = split_pairs(sampler, split)
    pred = forecast(params, sampler, pairs, dataset.platforms(), cfg)
    truth = split_truth(sampler, pairs)
    return pairs, dataset.denormalize(pred), dataset.denormalize(truth)


def persistence_predictions(dataset, split="test", m=8, sampler=None):
    """Persistence forecast ``x_{t+1} := x_t`` on the same pairs the model is scored on."""
    sampler = sampler or WindowSampler(dataset, m=m)
    pairs = split_pairs(sampler, split)
    pred = split_truth(sampler, pairs, offset=-1)
    truth = split_truth(sampler, pairs)
    return pairs, dataset.denormalize(pred), dataset.denormalize(truth)


def report(pairs, pred, truth, ecfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Metrics plus the per-node VI stratification of absolute errors."""
    rep = metrics(pred, truth)
    ids = sorted({g for g, _ in pairs})
    row = {g: i for i, g in enumerate(ids)}
    steps = sorted({lt for _, lt in pairs})
    col = {t: j for j, t in enumerate(steps)}
    C = truth.shape[1]
    err = np.zeros((len(ids), len(steps), C))
    series = np.zeros((len(ids), len(steps), C))
    for (g, lt), e, y in zip(pairs, np.abs(pred - truth), truth):
        err[row[g], col[lt]] = e
        series[row[g], col[lt]] = y
    rep.node_ids = ids
    rep.node_mae = err.mean(axis=1)
    if len(ids) >= 4 and len(steps) >= ecfg.vi_length:
        v = VARIABLES.index(ecfg.vi_variable)
        rep.vi = variability_index(np.swapaxes(series[:, :, v], 0, 1), ecfg.vi_length)
        rep.groups = stratify_nodes(rep.vi, ids)
        rep.group_mae, rep.group_size = stratified_mae(rep.node_mae, rep.groups)
    return rep


def stratified_csv(rep: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "count"] + list(rep.variables))
    for g in GROUPS:
        w.writerow([g, rep.group_size[g]] + [repr(float(x)) for x in rep.group_mae[g]])
    return buf.getvalue()


# ---------------------------------------------------------------- ablation / sweeps

def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    for vname, adaptive, dist in ABLATION_VARIANTS:
        if vname == name:
            if not adaptive:
                return base.replace(structure="fixed")
            return base.replace(structure="adaptive", use_distance=dist)
    raise ValueError(f"unknown ablation variant {name!r}")


def train_and_score(dataset, cfg: TrainConfig, ecfg: EvalConfig = EvalConfig(), sampler=None):
    """Fit one configuration and return its test-split :class:`MetricsReport`."""
    sampler = sampler or WindowSampler(dataset, cfg.m, cfg.k, cfg.radius_km, cfg.obs_obs)
    res = fit(dataset, cfg, sampler=sampler)
    return report(*model_predictions(res.params, dataset, cfg, "test", sampler), ecfg)


def _run_jobs(tasks, jobs):
    if jobs and jobs > 1 and len(tasks) > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=jobs)(delayed(f)(*a) for f, a in tasks)
    return [f(*a) for f, a in tasks]


@dataclass
class AblationResult:
    seeds: tuple
    reports: dict            # variant -> list of MetricsReport (one per seed)
    persistence: MetricsReport

    def mean_r2(self, variant):
        return np.mean([[np.nan if v is None else v for v in r.r2] for r in self.reports[variant]], axis=0)

    def mean_vi_gap(self, variant):
        return np.mean([r.vi_gap() for r in self.reports[variant]], axis=0)

    def rows(self):
        out = []
        for name, adaptive, dist in ABLATION_VARIANTS:
            out.append({"variant": name, "adaptive": adaptive,
                        "dist": "" if dist is None else dist,
                        **dict(zip(VARIABLES, self.mean_r2(name).tolist()))})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "adaptive", "dist"] + list(VARIABLES))
        for r in self.rows():
            w.writerow([r["variant"], int(r["adaptive"]), "" if r["dist"] == "" else int(r["dist"])]
                       + [repr(float(r[v])) for v in VARIABLES])
        return buf.getvalue()


def run_ablation(dataset, base: TrainConfig, seeds=(0, 1, 2), ecfg: EvalConfig = EvalConfig(),
                 jobs=1) -> AblationResult:
    """Train the full model, the no-distance variant and the fixed-graph variant per seed."""
    tasks, keys = [], []
    for name, _, _ in ABLATION_VARIANTS:
        for s in seeds:
            tasks.append((train_and_score, (dataset, variant_config(base, name).replace(seed=s), ecfg)))
            keys.append(name)
    results = _run_jobs(tasks, jobs)
    reports = {name: [] for name, _, _ in ABLATION_VARIANTS}
    for k, r in zip(keys, results):
        reports[k].append(r)
    pers = report(*persistence_predictions(dataset, "test", base.m), ecfg)
    return AblationResult(tuple(seeds), reports, pers)


SWEEP_FIELDS = {"tau": float, "hidden": int}


def run_sensitivity(dataset, base: TrainConfig, param: str, values, seeds=(0, 1, 2),
                    ecfg: EvalConfig = EvalConfig(), jobs=1) -> list:
    """Mean and population std (over seeds) of the variable-averaged test R^2 per sweep value."""
    if param not in SWEEP_FIELDS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_FIELDS)}")
    cast = SWEEP_FIELDS[param]
    tasks = [(train_and_score, (dataset, base.replace(**{param: cast(v)}, seed=s), ecfg))
             for v in values for s in seeds]
    results = _run_jobs(tasks, jobs)
    rows = []
    for i, v in enumerate(values):
        scores = [r.mean_r2() for r in results[i * len(seeds):(i + 1) * len(seeds)]]
        rows.append({"param": param, "value": cast(v), "mean_r2": float(np.mean(scores)),
                     "std_r2": float(np.std(scores))})
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "value", "mean_r2", "std_r2"])
    for r in rows:
        w.writerow([r["param"], r["value"], repr(r["mean_r2"]), repr(r["std_r2"])])
    return buf.getvalue()


def write_sweep_svg(rows, path):
    """Line chart of mean R^2 with a shaded +/- std band, one panel per swept parameter."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    params = list(dict.fromkeys(r["param"] for r in rows))
    fig, axes = plt.subplots(1, len(params), figsize=(4 * len(params), 3), squeeze=False)
    for ax, p in zip(axes[0], params):
        sub = [r for r in rows if r["param"] == p]
        x = np.arange(len(sub))
        mu = np.array([r["mean_r2"] for r in sub])
        sd = np.array([r["std_r2"] for r in sub])
        ax.plot(x, mu, marker="o")
        ax.fill_between(x, mu - sd, mu + sd, alpha=0.3)
        ax.set_xticks(x)
        ax.set_xticklabels([str(r["value"]) for r in sub])
        if p in REFERENCE_OPTIMUM:
            ref = REFERENCE_OPTIMUM[p]
            hits = [i for i, r in enumerate(sub) if r["value"] == ref]
            if hits:
                ax.axvline(hits[0], linestyle=":", color="grey")
        ax.set_xlabel(p)
        ax.set_ylabel("mean R$^2$")
    fig.tight_layout()
    with plt.rc_context({"svg.hashsalt": "asgn"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
