"""Command-line entry point.

Every command accepts ``--config FILE`` (JSON), ``--preset full|desk`` and any
number of ``--section.key value`` overrides, e.g. ``--model.tau 0.4``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, apply_overrides, desk_config, load_config
from .data import CityPair, few_shot_split, load_csv, save_csv, synth_pair
from .evaluation import evaluate
from .experiments import gradcheck, run_ablation, split_hash, sweep_memory, sweep_tasks
from .graph import gumbel_noise, node_similarity, squash_cosine, gumbel_adjacency
from .model import PARAM_NAMES
from .trainer import Forecaster, finetune, pretrain, train_from_scratch


def _ints(raw: str) -> list[int]:
    return [int(v) for v in raw.split(",") if v.strip()]


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class JsonlLog:
    def __init__(self, path: Path):
        self.path = path
        path.write_text("", encoding="utf-8")

    def __call__(self, row: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_config(args, extra: list[str]) -> Config:
    base = load_config(args.config) if args.config else (desk_config() if args.preset == "desk" else Config())
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise SystemExit(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise SystemExit(f"missing value for {tok}")
        pairs.append((key.replace("-", "_"), raw))
    cfg = apply_overrides(base, pairs)
    flags = {}
    if getattr(args, "no_memory", False):
        flags["model.use_memory"] = False
    if getattr(args, "no_mpe", False):
        flags["tasks.enable_mpe"] = False
    if getattr(args, "hard_graph", False):
        flags["model.hard_graph"] = True
    return cfg.replace(**flags) if flags else cfg


def _pair(args, cfg: Config) -> CityPair:
    sph = cfg.data.samples_per_hour
    return CityPair(load_csv(args.source, sph), load_csv(args.target, sph))


# ----------------------------------------------------------------- commands


def cmd_synth(args, cfg: Config) -> int:
    out = _out_dir(args)
    pair = synth_pair(args.n_source, args.n_target, args.source_days, args.target_days, cfg.data.samples_per_hour, args.seed)
    save_csv(pair.source, out / "source.csv")
    save_csv(pair.target, out / "target.csv")
    print(f"wrote {out / 'source.csv'} ({pair.source.n_nodes} nodes) and {out / 'target.csv'} ({pair.target.n_nodes} nodes)")
    return 0


def cmd_pretrain(args, cfg: Config) -> int:
    out = _out_dir(args)
    source = load_csv(args.source, cfg.data.samples_per_hour)
    ckpt = pretrain(source, cfg, args.seed, log=JsonlLog(out / "log.jsonl"))
    save_checkpoint(ckpt, out / "source.ckpt")
    print(f"saved {out / 'source.ckpt'} (config {cfg.digest()})")
    return 0


def cmd_finetune(args, cfg: Config) -> int:
    out = _out_dir(args)
    target = load_csv(args.target, cfg.data.samples_per_hour)
    train, _ = few_shot_split(target, cfg.data.finetune_days)
    log = JsonlLog(out / "log.jsonl")
    if args.scratch:
        model = train_from_scratch(train, cfg, args.seed, log=log)
    else:
        if not args.ckpt:
            raise SystemExit("finetune needs --ckpt (or --scratch)")
        model = finetune(load_checkpoint(args.ckpt), train, cfg, args.seed, log=log)
    save_checkpoint(model.to_checkpoint(), out / "target.ckpt")
    print(f"saved {out / 'target.ckpt'}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    out = _out_dir(args)
    model = Forecaster.from_checkpoint(load_checkpoint(args.ckpt))
    target = load_csv(args.target, model.samples_per_hour)
    _, test = few_shot_split(target, model.cfg.data.finetune_days)
    horizons = _ints(args.horizons) if args.horizons else None
    report = evaluate(model, test, horizons)
    _dump_json(report.to_dict(), out / "report.json")
    for h in report.horizons:
        print(f"step {h.step:3d}  MAE {h.mae:.4f}  RMSE {h.rmse:.4f}")
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    res = gradcheck(seed=args.seed or 0, corrupt=args.corrupt)
    for name in PARAM_NAMES:
        mark = "ok" if res.worst[name] < res.tolerance else "FAIL"
        print(f"{name:16s} {res.worst[name]:.3e}  {mark}")
    if res.passed:
        print(f"gradcheck passed (tolerance {res.tolerance:g})")
        return 0
    print("gradcheck failed: " + ", ".join(res.failing()))
    return 1


def _curve_csv(path: Path, key: str, rows: list[dict], cfg: Config, pair_hash: str) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.digest()} split_hash={pair_hash}\n")
        w = csv.writer(fh)
        w.writerow([key, "mae_mean", "mae_std"])
        for r in rows:
            w.writerow([r[key], repr(r["mae_mean"]), repr(r["mae_std"])])


def cmd_ablate(args, cfg: Config) -> int:
    out = _out_dir(args)
    pair = _pair(args, cfg)
    rows = run_ablation(pair, cfg, _ints(args.seeds))
    _dump_json({"config_hash": cfg.digest(), "seeds": _ints(args.seeds), "cells": rows}, out / "report.json")
    print("memory  mpe    mae_mean  mae_std")
    for r in rows:
        print(f"{str(r['memory']):6s}  {str(r['mpe']):5s}  {r['mae_mean']:.4f}    {r['mae_std']:.4f}")
    return 0


def cmd_sweep_memory(args, cfg: Config) -> int:
    out = _out_dir(args)
    pair = _pair(args, cfg)
    rows = sweep_memory(pair, cfg, _ints(args.sizes), _ints(args.seeds))
    _curve_csv(out / "curve.csv", "b", rows, cfg, split_hash(pair, cfg))
    _dump_json({"config_hash": cfg.digest(), "seeds": _ints(args.seeds), "points": rows}, out / "report.json")
    for r in rows:
        print(f"b={r['b']:3d}  MAE {r['mae_mean']:.4f} +- {r['mae_std']:.4f}")
    return 0


def cmd_sweep_tasks(args, cfg: Config) -> int:
    out = _out_dir(args)
    pair = _pair(args, cfg)
    ks = _ints(args.ks)
    if any(k < 1 for k in ks):
        raise SystemExit("task counts must be >= 1")
    rows = sweep_tasks(pair, cfg, ks, _ints(args.seeds))
    _curve_csv(out / "curve.csv", "k", rows, cfg, split_hash(pair, cfg))
    _dump_json({"config_hash": cfg.digest(), "seeds": _ints(args.seeds), "points": rows}, out / "report.json")
    for r in rows:
        print(f"k={r['k']}  MAE {r['mae_mean']:.4f} +- {r['mae_std']:.4f}")
    return 0


def cmd_dump_graph(args, cfg: Config) -> int:
    out = _out_dir(args)
    ckpt = load_checkpoint(args.ckpt)
    ccfg = Config.from_dict(ckpt.config)
    p = ckpt.params
    n = p["node_embedding"].shape[0]
    E = ad.as_tensor(p["node_embedding"])
    xi = node_similarity(E, p["memory"]) if ccfg.model.use_memory else squash_cosine(E @ E.T)
    noise = gumbel_noise(n, np.random.default_rng(ccfg.train.eval_seed))
    A = gumbel_adjacency(xi, ccfg.model.tau, noise=noise).A.data
    ids = ckpt.meta.get("node_ids") or [f"n{i:03d}" for i in range(n)]
    with (out / "adjacency.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", *ids])
        for i in range(n):
            w.writerow([ids[i], *(repr(float(v)) for v in A[i])])
    with (out / "edges.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target", "weight"])
        for i, j in zip(*np.nonzero(A > 0.5)):
            w.writerow([ids[i], ids[j], repr(float(A[i, j]))])
    print(f"wrote {out / 'adjacency.csv'} and {out / 'edges.csv'} ({int((A > 0.5).sum())} edges)")
    return 0


# ------------------------------------------------------------------ parser


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metatraffic", description="Meta-transfer traffic forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, seed_required=False, flags=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=["full", "desk"], default="full")
        p.add_argument("--seed", type=int, required=seed_required)
        if flags:
            p.add_argument("--no-memory", action="store_true")
            p.add_argument("--no-mpe", action="store_true")
            p.add_argument("--hard-graph", action="store_true")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic source/target CSV pair", flags=False)
    p.add_argument("--out", required=True)
    p.add_argument("--n-source", type=int, default=20)
    p.add_argument("--n-target", type=int, default=12)
    p.add_argument("--source-days", type=int, default=30)
    p.add_argument("--target-days", type=int, default=14)

    p = add("pretrain", cmd_pretrain, "meta-train on a source city", seed_required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "fine-tune on the target's few-shot range", seed_required=True)
    p.add_argument("--ckpt")
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scratch", action="store_true", help="random init instead of a source checkpoint")

    p = add("eval", cmd_eval, "score a fine-tuned checkpoint on the target's test range", flags=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizons", help="comma-separated prediction steps, e.g. 1,3,6")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every parameter gradient", flags=False)
    p.add_argument("--corrupt", choices=PARAM_NAMES, help=argparse.SUPPRESS)

    for name, fn, help_ in (
        ("ablate", cmd_ablate, "memory x meta-PE ablation grid"),
        ("sweep-memory", cmd_sweep_memory, "MAE versus memory size"),
        ("sweep-tasks", cmd_sweep_tasks, "MAE versus number of periodicity tasks"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--source", required=True)
        p.add_argument("--target", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2,3,4")
        if name == "sweep-memory":
            p.add_argument("--sizes", default="2,8,32,64")
        if name == "sweep-tasks":
            p.add_argument("--ks", default="1,2,3")

    p = add("dump-graph", cmd_dump_graph, "export the learned soft adjacency of a checkpoint", flags=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = build_config(args, extra)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
