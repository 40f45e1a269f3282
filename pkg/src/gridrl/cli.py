"""Command-line entry point (``gridrl <subcommand>``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import harness
from .chronics import generate_synthetic, get_profile, save_chronic
from .control import collect_demonstrations, load_demos, save_demos
from .grid import load_grid
from .rl import Hyperparams


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config (YAML)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    hp = p.add_argument_group("hyperparameters (override the config)")
    for f in fields(Hyperparams):
        hp.add_argument(f"--{f.name.replace('_', '-')}", dest=f"hp_{f.name}", type=type(getattr(Hyperparams(), f.name)))
    fl = p.add_argument_group("ablation flags")
    fl.add_argument("--no-dqfd", action="store_true")
    fl.add_argument("--no-gnn", action="store_true")
    fl.add_argument("--no-filter", action="store_true")
    fl.add_argument("--shaping", choices=["off", "static", "bootstrapped"])
    b = p.add_argument_group("budgets")
    for name in ("demo_episodes", "pretrain_steps", "train_steps", "learn_interval", "eval_interval"):
        b.add_argument(f"--{name.replace('_', '-')}", dest=f"b_{name}", type=int)


def _config(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    hp = {f.name: getattr(args, f"hp_{f.name}") for f in fields(Hyperparams)
          if getattr(args, f"hp_{f.name}", None) is not None}
    if hp:
        cfg = replace(cfg, hp=replace(cfg.hp, **hp))
    flags = {}
    if args.no_dqfd:
        flags["dqfd"] = False
    if args.no_gnn:
        flags["gnn"] = False
    if args.no_filter:
        flags["filter"] = False
    if args.shaping:
        flags["shaping"] = args.shaping
    if flags:
        cfg = replace(cfg, flags=replace(cfg.flags, **flags))
    budgets = {k[2:]: v for k, v in vars(args).items() if k.startswith("b_") and v is not None}
    if budgets:
        cfg = replace(cfg, budgets=replace(cfg.budgets, **budgets))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _config(args)
    res = harness.train(cfg, progress=lambda r: logging.info("episode %d survive %d", r["episode"], r["survive_time"]))
    print(f"metrics: {Path(cfg.out_dir) / 'metrics.csv'}")
    print(f"checkpoint: {Path(cfg.out_dir) / 'checkpoint.npz'}")
    return 0


def cmd_expert_demo(args) -> int:
    cfg = _config(args)
    grid = load_grid(cfg.grid)
    demos = collect_demonstrations(grid, cfg.demo_chronics.load(grid), cfg.budgets.demo_episodes, cfg.hp, cfg.env)
    out = Path(args.output or Path(cfg.out_dir) / "demos.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_demos(demos, out)
    print(f"{len(demos)} demo records from {demos.episodes} episodes -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    grid = load_grid(cfg.grid)
    demos = load_demos(args.demos, grid, cfg.env)
    system = harness.build_system(cfg, grid)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    harness.pretrain_dqfd(system, demos, cfg.budgets.pretrain_steps, out / "pretrain_metrics.csv")
    harness.save_system(system, out / "pretrained.npz", cfg)
    print(f"checkpoint: {out / 'pretrained.npz'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args) if args.config else None
    system, cfg = harness.load_system(args.checkpoint, cfg)
    grid = system.grid
    chronics = harness.ChronicSource(path=str(args.chronics)).load(grid) if args.chronics else cfg.eval_chronics.load(grid)
    rep = harness.evaluate(system, chronics, cfg.env, filter_on=False if args.no_filter else None)
    out = Path(args.output or Path(cfg.out_dir) / "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out)
    _print(rep.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    res = harness.ablate(cfg, variants=tuple(args.variants))
    _print({k: v.summary() for k, v in res.items()})
    return 0


def cmd_bench(args) -> int:
    system, cfg = harness.load_system(args.checkpoint)
    grid = system.grid
    if args.states and Path(args.states).exists():
        states = harness.load_states(args.states, grid, cfg.env)
    else:
        states = harness.record_danger_states(grid, cfg.eval_chronics.load(grid), args.n_states, cfg.env)
        if args.states:
            harness.save_states(states, args.states)
    if len(states) < 100:
        print(f"warning: only {len(states)} danger states available", file=sys.stderr)
    _print(harness.bench_inference(system, states, args.repeats).summary())
    return 0


def cmd_export_graph(args) -> int:
    cfg = _config(args)
    grid = load_grid(cfg.grid)
    chronic = cfg.eval_chronics.load(grid)[0]
    harness.export_graph(grid, chronic, args.t, args.edges, args.features, cfg.env)
    print(f"edges: {args.edges}\nfeatures: {args.features}")
    return 0


def cmd_export_heatmap(args) -> int:
    system, _ = harness.load_system(args.checkpoint)
    score = harness.export_gnn_heatmap(system, args.output)
    print(f"heatmap: {args.output}\nsymmetry_score: {score:.6f}")
    return 0


def cmd_gen_chronics(args) -> int:
    grid = load_grid(args.grid)
    prof = get_profile(args.profile)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for s in range(args.start_seed, args.start_seed + args.count):
        save_chronic(generate_synthetic(grid, s, prof, args.horizon), out, grid)
    print(f"{args.count} chronics -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridrl", description="Hierarchical GNN-based topology control on a DC grid.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="collect demos, pretrain, then train")
    _add_common(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("expert-demo", help="run the expert and save demonstrations")
    _add_common(s)
    s.add_argument("--output", type=Path)
    s.set_defaults(fn=cmd_expert_demo)

    s = sub.add_parser("pretrain", help="DQfD pretraining from a demo file")
    _add_common(s)
    s.add_argument("--demos", type=Path, required=True)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint against Do-Nothing")
    _add_common(s)
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--chronics", type=Path, help="directory of chronic folders")
    s.add_argument("--output", type=Path)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and evaluate ablation variants")
    _add_common(s)
    s.add_argument("--variants", nargs="+", default=list(harness.ABLATIONS), choices=list(harness.ABLATIONS))
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("bench-inference", help="decision latency: agents vs expert")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--states", type=Path, help="JSON-lines danger states (recorded if missing)")
    s.add_argument("--n-states", type=int, default=100)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("export-graph", help="write the line graph of a state as CSV")
    _add_common(s)
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--edges", type=Path, default=Path("graph_edges.csv"))
    s.add_argument("--features", type=Path, default=Path("graph_features.csv"))
    s.set_defaults(fn=cmd_export_graph)

    s = sub.add_parser("export-heatmap", help="first GNN layer weights as CSV")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--output", type=Path, default=Path("gnn_heatmap.csv"))
    s.set_defaults(fn=cmd_export_heatmap)

    s = sub.add_parser("gen-chronics", help="write seeded synthetic chronics")
    s.add_argument("--grid", default="case14")
    s.add_argument("--profile", default="hard")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--start-seed", type=int, default=0)
    s.add_argument("--horizon", type=int, default=2016)
    s.add_argument("--output", type=Path, required=True)
    s.set_defaults(fn=cmd_gen_chronics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
