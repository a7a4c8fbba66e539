"""Command line interface.

Subcommands: datagen, pretrain-embedding, train, eval, ablate. Configs are
flat JSON files mirroring TrainConfig; datasets double as suite files for
evaluation (their manifest carries the task suite and world config).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import evaluation, trainer
from .datagen import WorldConfig, generate_dataset, load_dataset, make_task_suite


def _cmd_datagen(args) -> int:
    cfg = WorldConfig()
    suite = make_task_suite(args.tasks, args.suite_seed if args.suite_seed is not None else args.seed, cfg)
    manifest = generate_dataset(
        suite, args.demos, args.action_free, args.seed, args.out, cfg, noise_scale=args.noise_scale
    )
    print(f"wrote {manifest['n_episodes']} episodes to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = trainer.TrainConfig.from_file(args.config)
    result = trainer.pretrain_embedding(args.data, cfg, args.out)
    print(
        f"embedding saved to {result['path']} "
        f"(heldout fm {result['heldout_first']:.4f} -> {result['heldout_last']:.4f})"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = trainer.TrainConfig.from_file(args.config)
    result = trainer.fit(
        cfg, args.data, args.out, action_free_path=args.action_free_data, resume=args.resume
    )
    print(f"trained {result['final_step']} steps; {len(result['checkpoints'])} checkpoints in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    suite = load_dataset(args.suite).suite()
    paths = evaluation.list_checkpoints(args.ckpt_dir)
    report = evaluation.evaluate(paths, suite, args.episodes, args.seed, last_k=args.last_k)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(payload + "\n")
    print(payload)
    print(f"selected score {report.selected_score:.3f} at step {report.selected_step}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = trainer.TrainConfig.from_file(args.config)
    values = [v for v in args.values.split(",") if v]
    grid = evaluation.ablate(
        args.axis,
        values,
        cfg,
        args.data,
        args.out,
        episodes_per_task=args.episodes,
        seed=args.seed,
        action_free_path=args.action_free_data,
        last_k=args.last_k,
    )
    evaluation.emit_plots(
        {f"{grid.axis}={v}": r for v, r in zip(grid.values, grid.reports)}, args.out, grid=grid
    )
    for v, s in zip(grid.values, grid.selected_scores):
        print(f"{args.axis}={v}: selected score {s:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flare", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="generate an expert demonstration dataset")
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--demos", type=int, required=True)
    g.add_argument("--action-free", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--suite-seed", type=int, default=None, help="task suite seed (defaults to --seed)")
    g.add_argument("--noise-scale", type=float, default=0.01)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_datagen)

    g = sub.add_parser("pretrain-embedding", help="stage-one embedding training")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_pretrain)

    g = sub.add_parser("train", help="train a policy")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--action-free-data", default=None)
    g.add_argument("--resume", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_train)

    g = sub.add_parser("eval", help="evaluate a directory of checkpoints")
    g.add_argument("--ckpt-dir", required=True)
    g.add_argument("--suite", required=True, help="dataset file whose manifest defines the suite")
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--last-k", type=int, default=5)
    g.add_argument("--out", default=None)
    g.set_defaults(func=_cmd_eval)

    g = sub.add_parser("ablate", help="sweep one training axis and evaluate each cell")
    g.add_argument("--axis", required=True)
    g.add_argument("--values", required=True, help="comma-separated values")
    g.add_argument("--config", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--action-free-data", default=None)
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--last-k", type=int, default=5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
