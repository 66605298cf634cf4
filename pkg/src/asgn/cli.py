"""``asgn`` command line: simulate, train, evaluate, ablate, sweep, inspect."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import KHOP, RADIUS_KM, WINDOW, RunConfig, dump_json, load_run_config
from .evaluation import (ABLATION_VARIANTS, model_predictions, persistence_predictions, report,
                         run_ablation, run_sensitivity, stratified_csv, sweep_csv, write_sweep_svg)
from .graphbuild import WindowSampler
from .model import init_params
from .synthgen import ConfigError, DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .training import DivergenceError, fit, load_checkpoint, save_checkpoint, write_losses_csv

log = logging.getLogger("asgn")

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 2
SCHEMA_PATH = Path(__file__).with_name("schemas") / "metrics.schema.json"


class ShapeMismatch(ValueError):
    pass


def _common(p, data=True):
    if data:
        p.add_argument("dataset", help="dataset directory written by `asgn simulate`")
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--window", type=int, help=f"window length m (default {WINDOW})")
    p.add_argument("--khop", type=int, help=f"subgraph hops k (default {KHOP})")
    p.add_argument("--radius-km", type=float, help=f"initial edge radius (default {RADIUS_KM:g})")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for independent trainings")


def build_parser():
    ap = argparse.ArgumentParser(prog="asgn", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _common(p, data=False)

    p = sub.add_parser("train", help="pretrain or fine-tune a model")
    _common(p)
    p.add_argument("--phase", choices=("pretrain", "finetune"))
    p.add_argument("--pretrain-checkpoint")
    p.add_argument("--freeze-structure", action="store_true")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--baseline", choices=("fixed-graph",), help="train the fixed-radius-graph variant")

    p = sub.add_parser("evaluate", help="score a checkpoint (or a baseline) on a split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--baseline", choices=("persistence",))

    p = sub.add_parser("ablate", help="full / no-distance / fixed-graph matrix")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: eval.seeds)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("sweep", help="tau / hidden sensitivity sweep")
    _common(p)
    p.add_argument("--param", choices=("tau", "hidden", "both"), default="both")
    p.add_argument("--values", help="comma-separated values (single parameter only)")
    p.add_argument("--seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--svg", action="store_true", help="also write sweep.svg")

    p = sub.add_parser("inspect", help="summarise a dataset directory or checkpoint file")
    p.add_argument("path")
    return ap


def resolve_config(args) -> RunConfig:
    rc = load_run_config(args.config)
    tr, sim = {}, {}
    for flag, key in (("seed", "seed"), ("tau", "tau"), ("hidden", "hidden"), ("window", "m"),
                      ("khop", "k"), ("radius_km", "radius_km"), ("phase", "phase"), ("lr", "lr"),
                      ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            tr[key] = v
    if getattr(args, "freeze_structure", False):
        tr["freeze_structure"] = True
    if getattr(args, "baseline", None) == "fixed-graph":
        tr["structure"] = "fixed"
    if getattr(args, "seed", None) is not None:
        sim["seed"] = args.seed
    rc = RunConfig(sim=rc.sim.__class__.from_dict({**rc.sim.to_dict(), **sim}),
                   train=rc.train.replace(**tr), eval=rc.eval, name=rc.name)
    return rc.validate()


def out_dir(args, rc) -> Path:
    d = Path(args.out) if args.out else Path("runs") / rc.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _seeds(args, rc):
    if getattr(args, "seeds", None):
        return tuple(int(s) for s in args.seeds.split(","))
    return tuple(rc.eval.seeds)


def check_checkpoint_shapes(ck, cfg, platforms):
    expect = init_params(cfg, platforms)
    got = ck.params
    missing = sorted(set(expect) - set(got))
    extra = sorted(set(got) - set(expect))
    wrong = [k for k in expect if k in got and tuple(np.shape(got[k])) != expect[k].shape]
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append("missing " + ", ".join(missing[:5]))
        if extra:
            parts.append("unexpected " + ", ".join(extra[:5]))
        if wrong:
            parts.append("shape differs for " + ", ".join(
                f"{k} {tuple(np.shape(got[k]))} vs {expect[k].shape}" for k in wrong[:5]))
        raise ShapeMismatch("checkpoint does not match config/dataset: " + "; ".join(parts))


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    rc = resolve_config(args)
    out = out_dir(args, rc)
    ds = generate_dataset(rc.sim)
    write_dataset(ds, out)
    dump_json(rc.to_dict(), out / "config.resolved.json")
    n_obs = sum(len(o) for o in ds.obs)
    print(f"grid nodes: {ds.n_cells}  steps: {ds.n_steps}  observations: {n_obs}")
    return EXIT_OK


def cmd_train(args):
    rc = resolve_config(args)
    ds = read_dataset(args.dataset)
    cfg = rc.train
    init = None
    if args.pretrain_checkpoint:
        init = load_checkpoint(args.pretrain_checkpoint)
        check_checkpoint_shapes(init, cfg, ds.platforms())
    out = out_dir(args, rc)
    dump_json(rc.to_dict(), out / "config.resolved.json")
    res = fit(ds, cfg, init=init)
    write_losses_csv(res.history, out / "losses.csv")
    save_checkpoint(res.checkpoint, out / "checkpoint.bin")
    if res.diverged:
        print(f"training diverged; last finite parameters saved to {out / 'checkpoint.bin'}",
              file=sys.stderr)
        return EXIT_DIVERGED
    last = res.history[-1] if res.history else (0, float("nan"), float("nan"))
    print(f"epochs: {len(res.history)}  best: {res.best_epoch}  train: {last[1]:.5f}  val: {last[2]:.5f}")
    return EXIT_OK


def _metrics_doc(rep, split, model, ecfg):
    d = {"split": split, "model": model, **rep.to_dict()}
    if rep.group_mae:
        d["vi_variable"] = ecfg.vi_variable
        d["vi_length"] = ecfg.vi_length
    return d


def cmd_evaluate(args):
    rc = resolve_config(args)
    ds = read_dataset(args.dataset)
    ecfg = rc.eval
    if args.baseline == "persistence":
        model = "persistence"
        rep = report(*persistence_predictions(ds, args.split, rc.train.m), ecfg)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint unless --baseline persistence is given")
        ck = load_checkpoint(args.checkpoint)
        cfg = ck.train_config()
        check_checkpoint_shapes(ck, cfg, ds.platforms())
        model = cfg.structure
        sampler = WindowSampler(ds, cfg.m, cfg.k, cfg.radius_km, cfg.obs_obs)
        rep = report(*model_predictions(ck.model_params(), ds, cfg, args.split, sampler), ecfg)
    out = out_dir(args, rc)
    stem = "metrics" if args.split == "test" else f"metrics.{args.split}"
    strat = "stratified" if args.split == "test" else f"stratified.{args.split}"
    if model == "persistence":
        stem, strat = stem + ".persistence", strat + ".persistence"
    dump_json(_metrics_doc(rep, args.split, model, ecfg), out / f"{stem}.json")
    if rep.group_mae:
        (out / f"{strat}.csv").write_text(stratified_csv(rep))
    dump_json(rc.to_dict(), out / "config.resolved.json")
    r2 = "  ".join(f"{v}={'n/a' if r is None else f'{r:.4f}'}" for v, r in zip(rep.variables, rep.r2))
    print(f"{model} {args.split} R2: {r2}")
    return EXIT_OK


def cmd_ablate(args):
    rc = resolve_config(args)
    ds = read_dataset(args.dataset)
    res = run_ablation(ds, rc.train, _seeds(args, rc), rc.eval, jobs=args.jobs)
    out = out_dir(args, rc)
    (out / "ablation.csv").write_text(res.to_csv())
    detail = {
        "seeds": list(res.seeds),
        "persistence_r2": dict(zip(res.persistence.variables, res.persistence.r2)),
        "variants": {name: {"mean_r2": res.mean_r2(name).tolist(),
                            "vi_gap": res.mean_vi_gap(name).tolist()}
                     for name, _, _ in ABLATION_VARIANTS},
    }
    dump_json(detail, out / "ablation.json")
    dump_json(rc.to_dict(), out / "config.resolved.json")
    sys.stdout.write(res.to_csv())
    return EXIT_OK


def cmd_sweep(args):
    rc = resolve_config(args)
    ds = read_dataset(args.dataset)
    seeds = _seeds(args, rc)
    grids = {"tau": rc.eval.tau_grid, "hidden": rc.eval.hidden_grid}
    params = ("tau", "hidden") if args.param == "both" else (args.param,)
    if args.values:
        if len(params) != 1:
            raise ConfigError("--values needs a single --param")
        grids[params[0]] = [float(v) for v in args.values.split(",")]
    rows = []
    for p in params:
        rows += run_sensitivity(ds, rc.train, p, grids[p], seeds, rc.eval, jobs=args.jobs)
    out = out_dir(args, rc)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    if args.svg or rc.eval.svg:
        write_sweep_svg(rows, out / "sweep.svg")
    dump_json(rc.to_dict(), out / "config.resolved.json")
    sys.stdout.write(sweep_csv(rows))
    return EXIT_OK


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir():
        ds = read_dataset(path)
        counts = {}
        for step in ds.obs:
            for o in step:
                counts[o.platform] = counts.get(o.platform, 0) + 1
        info = {"grid_nodes": ds.n_cells, "steps": ds.n_steps, "splits": ds.splits,
                "observations": counts, "norm_mean": ds.norm_mean.tolist(),
                "norm_std": ds.norm_std.tolist()}
    else:
        ck = load_checkpoint(path)
        info = {"epoch": ck.epoch, "config": ck.config, "meta": ck.meta,
                "tensors": {k: list(np.shape(v)) for k, v in ck.params.items()},
                "scalars": int(sum(np.size(v) for v in ck.params.values()))}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("ASGN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ShapeMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
