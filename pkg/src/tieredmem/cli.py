"""Command-line entry point.

Subcommands:
  gen-data   render a scripted-expert dataset to disk
  train      streaming training on one dataset
  eval       closed-loop evaluation of a saved checkpoint
  ablate     run a named experiment grid (resumable, cell-cached)
  verify     run built-in integrity suites
  defaults   print the default experiment config as YAML
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import pathlib
import sys

import numpy as np
import yaml

from .data import generate_dataset, load_dataset, save_dataset
from .envs import TASKS, make_task
from .policy import VARIANTS, VariantSpec, build_variant
from .trainer import TrainConfig, capacity_sweep, eval_rollout, run_cell, streaming_train


@dataclasses.dataclass
class ExperimentConfig:
    task: str = "seqtap"
    variant: str = "full"
    seed: int = 0
    n_episodes: int = 200
    data_seed: int = 1234
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    t_s: int = 6
    t_k: int = 8
    n_sc: int = 3
    m_exec: int = 4
    eval_trials: int = 50
    eval_seed: int = 9000

    @classmethod
    def load(cls, path):
        raw = yaml.safe_load(pathlib.Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise SystemExit(f"config {path}: expected a mapping at top level")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise SystemExit(f"config {path}: unknown keys {sorted(unknown)}; "
                             f"allowed: {sorted(known)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in TASKS:
            raise SystemExit(f"unknown task {self.task!r}; options: {sorted(TASKS)}")
        if self.variant not in VARIANTS:
            raise SystemExit(f"unknown variant {self.variant!r}; options: {list(VARIANTS)}")

    def to_yaml(self):
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=False)


def _echo(cfg):
    print("resolved config:")
    for line in cfg.to_yaml().rstrip().splitlines():
        print("  " + line)


def _load_cfg(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for name in ("task", "variant", "seed", "epochs"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    cfg.validate()
    return cfg


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    _echo(cfg)
    task = make_task(cfg.task)
    episodes, _ = generate_dataset(task, cfg.n_episodes, cfg.data_seed)
    out = pathlib.Path(args.out)
    save_dataset(episodes, out)
    lengths = [len(ep.images) for ep in episodes]
    print(f"wrote {len(episodes)} episodes to {out} "
          f"(steps min/median/max = {min(lengths)}/{int(np.median(lengths))}/{max(lengths)})")


def cmd_train(args):
    cfg = _load_cfg(args)
    _echo(cfg)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        episodes = load_dataset(pathlib.Path(args.data))
    else:
        episodes, _ = generate_dataset(make_task(cfg.task), cfg.n_episodes, cfg.data_seed)
    tc = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr,
                     seed=cfg.seed, variant=cfg.variant, t_s=cfg.t_s,
                     t_k=cfg.t_k, n_sc=cfg.n_sc, m_exec=cfg.m_exec)
    policy, _ = streaming_train(episodes, tc,
                                metrics_path=out / "metrics.jsonl")
    policy.save(out / "checkpoint.memo")
    (out / "config.yaml").write_text(cfg.to_yaml())
    print(f"saved checkpoint to {out / 'checkpoint.memo'}")


def cmd_eval(args):
    ckpt = pathlib.Path(args.checkpoint)
    cfg_path = ckpt.parent / "config.yaml"
    cfg = ExperimentConfig.load(cfg_path) if cfg_path.exists() else ExperimentConfig()
    if args.task:
        cfg.task = args.task
    if args.trials:
        cfg.eval_trials = args.trials
    _echo(cfg)
    spec = VariantSpec(cfg.variant, t_s=cfg.t_s, t_k=cfg.t_k, n_sc=cfg.n_sc)
    policy = build_variant(spec, cfg.seed)
    policy.load(ckpt)
    task = make_task(cfg.task)
    res = eval_rollout(policy, task, cfg.eval_trials, cfg.eval_seed,
                       m_exec=cfg.m_exec)
    print(json.dumps(res, indent=2))


_TABLE1_VARIANTS = ("markov", "fifo", "simmerge", "full")
_TABLE4_VARIANTS = ("full", "no_tpe", "consol_add", "gate_add")


def _print_grid(rows):
    if not rows:
        return
    keys = ["task", "variant", "seed", "t_s", "t_k", "success_rate"]
    widths = [max(len(k), max(len(str(r.get(k, ""))) for r in rows)) for k in keys]
    print("  ".join(k.ljust(w) for k, w in zip(keys, widths)))
    for r in rows:
        print("  ".join(str(r.get(k, "")).ljust(w) for k, w in zip(keys, widths)))


def cmd_ablate(args):
    out = pathlib.Path(args.out)
    seeds = list(range(args.seeds))
    rows = []
    if args.suite in ("table1", "table4"):
        variants = _TABLE1_VARIANTS if args.suite == "table1" else _TABLE4_VARIANTS
        for task_id in TASKS:
            for variant in variants:
                for seed in seeds:
                    rows.append(run_cell(task_id, variant, seed, out,
                                         epochs=args.epochs))
    elif args.suite == "fig5":
        for task_id in ("putback", "seqtap"):
            rows.extend(capacity_sweep(task_id, out, seeds=tuple(seeds),
                                       epochs=args.epochs))
    else:
        raise SystemExit(f"unknown suite {args.suite!r}")
    _print_grid(rows)


def cmd_verify(args):
    from .verify import SUITES, run_suite
    suites = sorted(SUITES) if args.suite == "all" else [args.suite]
    any_fail = False
    for name in suites:
        for check, ok, detail in run_suite(name):
            status = "PASS" if ok else "FAIL"
            any_fail |= not ok
            print(f"[{status}] {name}/{check}" + (f"  ({detail})" if detail else ""))
    sys.exit(1 if any_fail else 0)


def cmd_defaults(_args):
    print(ExperimentConfig().to_yaml(), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="tieredmem",
                                description="Tiered-memory visuomotor policy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an expert dataset")
    g.add_argument("--config")
    g.add_argument("--task", choices=sorted(TASKS))
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="streaming training")
    t.add_argument("--config")
    t.add_argument("--task", choices=sorted(TASKS))
    t.add_argument("--variant", choices=list(VARIANTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--data", help="pre-generated dataset directory")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", choices=sorted(TASKS))
    e.add_argument("--trials", type=int)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an experiment grid")
    a.add_argument("--suite", required=True, choices=["table1", "table4", "fig5"])
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--epochs", type=int, default=30)
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("verify", help="run integrity suites")
    v.add_argument("--suite", default="all",
                   choices=["all", "numerics", "memory", "diffusion", "envs"])
    v.set_defaults(fn=cmd_verify)

    d = sub.add_parser("defaults", help="print default config YAML")
    d.set_defaults(fn=cmd_defaults)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
