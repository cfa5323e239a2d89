"""Command-line driver.

Subcommands: ``make-data``, ``pretrain``, ``train``, ``sweep``, ``report`` and
``eval``. Exit codes: 0 success, 1 training aborted, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from taps import report as rep
from taps.data import SUITE_TASKS, SyntheticSuite, cnn_descriptor, resolve_dataset, vit_descriptor, write_timg
from taps.errors import ConfigurationError, TapsError, TrainingAborted
from taps.model import TaskNetwork
from taps.optim import DEFAULT_LAMBDA_GRID, TrainConfig, parse_config_text
from taps.store import ModelStore, param_report
from taps.train import (TaskSpec, accuracy, lambda_sweep, pretrain_base, train_incremental, train_joint,
                        train_joint_memory_efficient)

log = logging.getLogger("taps")

REGIMES = ("incremental", "joint", "joint-mem-efficient")
# flag name -> TrainConfig field
CONFIG_FLAGS = {"lam": "lam", "tau": "tau", "epochs": "epochs", "batch_size": "batch_size",
                "lr": "learning_rate", "momentum": "momentum", "seed": "seed", "weight_decay": "weight_decay"}
BASE_DEFAULTS = {"learning_rate": 0.05, "epochs": 30, "lam": 0.0}


class UsageError(Exception):
    """Raised for flag problems found after argparse has run."""


def _task_id(spec: str) -> str:
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        return rest
    return os.path.splitext(os.path.basename(rest))[0]


def _load(spec, split, seed, flag):
    try:
        return resolve_dataset(spec, split, seed)
    except FileNotFoundError as exc:
        raise UsageError(f"{flag}: dataset file not found: {exc.args[0] if exc.args else spec}") from exc
    except ConfigurationError as exc:
        raise UsageError(f"{flag}: {exc}") from exc


def _task_spec(spec, seed, eval_spec=None, flag="--task") -> TaskSpec:
    train = _load(spec, "train", seed, flag)
    if eval_spec is not None:
        held_out = _load(eval_spec, "test", seed, "--eval-data")
    elif spec.startswith("synth:"):
        held_out = _load(spec, "test", seed, flag)
    else:
        held_out = None
    return TaskSpec(_task_id(spec), train, held_out)


def _config(args, defaults=None) -> TrainConfig:
    values = dict(defaults or {})
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UsageError(f"--config: file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for flag, name in CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    return TrainConfig(**values)


def _descriptor(arch, input_shape, classes):
    if arch == "cnn":
        if len(input_shape) != 3:
            raise UsageError(f"--arch cnn needs [C, H, W] inputs, got {list(input_shape)}")
        return cnn_descriptor(tuple(input_shape), classes=classes)
    return vit_descriptor(tuple(input_shape), num_tokens=input_shape[1])


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump_json(path, obj):
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _pretrain(spec, flag, cfg, arch, out_path):
    task = _task_spec(spec, cfg.seed, flag=flag)
    base = pretrain_base(_descriptor(arch, task.train.input_shape, task.num_classes), task, cfg)
    ModelStore.create(out_path, base, overwrite=True)
    acc = accuracy(TaskNetwork(base, task.num_classes, gates="off"), task.eval_set)
    log.info("pretrained base on %s: %.2f%% held-out accuracy", task.task_id, acc)
    return base


def _base_for(args):
    """The base named by ``--store``, or a freshly pretrained one saved under ``--out``."""
    if args.store:
        if not os.path.exists(args.store):
            raise UsageError(f"--store: checkpoint not found: {args.store}")
        return ModelStore(args.store)
    cfg = TrainConfig(**dict(BASE_DEFAULTS, epochs=args.base_epochs, seed=args.seed or 0))
    path = os.path.join(args.out, "base.taps")
    _pretrain(args.base_task, "--base-task", cfg, args.arch, path)
    return ModelStore(path)


# -- subcommands -------------------------------------------------------------

def cmd_make_data(args):
    if args.task not in SUITE_TASKS:
        raise UsageError(f"--task must be one of {', '.join(SUITE_TASKS)}")
    suite = SyntheticSuite(seed=args.seed)
    ds = suite.dataset(args.task, args.split, args.size)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_timg(args.out, ds)
    print(f"wrote {ds.count} examples of {args.task}/{args.split} to {args.out}")
    return 0


def cmd_pretrain(args):
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    _pretrain(args.task, "--task", _config(args, BASE_DEFAULTS), args.arch, args.out)
    print(f"base checkpoint written to {args.out}")
    return 0


def _metadata(cfg, regime, spec, seed):
    return {"lambda": cfg.lam, "tau": cfg.tau, "seed": cfg.seed, "epochs": cfg.epochs,
            "regime": regime, "data": spec, "data_seed": seed}


def cmd_train(args):
    if not args.task:
        raise UsageError("--task is required (repeat it for several tasks)")
    if args.eval_data and len(args.eval_data) != len(args.task):
        raise UsageError("--eval-data must be given once per --task, in the same order")
    cfg = _config(args)
    ids = [_task_id(t) for t in args.task]
    if len(set(ids)) != len(ids):
        raise UsageError(f"--task: duplicate task ids {ids}")
    tasks = [_task_spec(t, cfg.seed, args.eval_data[i] if args.eval_data else None) for i, t in enumerate(args.task)]
    os.makedirs(args.out, exist_ok=True)

    source = _base_for(args)

    summary = {"regime": args.regime, "config": cfg.to_dict(), "tasks": {}}
    if args.regime == "incremental":
        store = source
        for task, spec in zip(tasks, args.task):
            res = train_incremental(store.base, task, cfg,
                                    history_path=os.path.join(args.out, f"history_{task.task_id}.jsonl"))
            store.save_task(res.model, _metadata(cfg, args.regime, spec, cfg.seed))
            summary["tasks"][task.task_id] = res.history[-1]
    else:
        if args.regime == "joint":
            res = train_joint(source.base, tasks, cfg, history_dir=args.out)
        else:
            res = train_joint_memory_efficient(source.base, tasks, cfg, history_dir=args.out)
            summary["phase2_trainable_params"] = res.phase2_trainable_params
        path = os.path.join(args.out, "checkpoint.taps")
        store = ModelStore.create(path, res.base, overwrite=True)
        for task, spec in zip(tasks, args.task):
            store.save_task(res.models[task.task_id], _metadata(cfg, args.regime, spec, cfg.seed))
            summary["tasks"][task.task_id] = res.histories[task.task_id][-1]
    summary["checkpoint"] = os.path.basename(store.path)
    _dump_json(os.path.join(args.out, "run.json"), summary)
    for tid, last in summary["tasks"].items():
        print(f"{tid}: accuracy {last['accuracy']:.2f}%  open gates {last['open_gates']}")
    print(f"checkpoint: {store.path}")
    return 0


def _parse_grid(text):
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--grid: cannot parse {text!r} as comma-separated numbers") from exc
    if not grid:
        raise UsageError("--grid: the lambda grid is empty")
    if any(g < 0 for g in grid):
        raise UsageError("--grid: lambda values must be non-negative")
    return grid


def cmd_sweep(args):
    grid = _parse_grid(args.grid)
    cfg = _config(args)
    task = _task_spec(args.task, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    base = _base_for(args).base
    rows = lambda_sweep(base, task, grid, cfg, history_dir=args.out)
    _write_text(os.path.join(args.out, "frontier.csv"), rep.frontier_csv(rows))
    _write_text(os.path.join(args.out, "frontier.svg"), rep.frontier_svg(rows))
    for r in rows:
        print(f"lambda={r['lambda']:g}: accuracy {r['accuracy']:.2f}%  layers {r['layer_pct']:.1f}%  "
              f"params {r['param_pct']:.1f}%")
    return 0


def cmd_report(args):
    if not os.path.exists(args.store):
        raise UsageError(f"--store: checkpoint not found: {args.store}")
    store = ModelStore(args.store)
    report = param_report(store)
    smap = rep.SharingMap.from_report(report)
    os.makedirs(args.out, exist_ok=True)
    _dump_json(os.path.join(args.out, "report.json"), report)
    _write_text(os.path.join(args.out, "sharing_map.json"), smap.to_json())
    _write_text(os.path.join(args.out, "sharing_map.svg"), rep.sharing_map_svg(smap))
    for t in report["tasks"]:
        row = "".join("X" if b else "." for b in t["layer_map"])
        print(f"{t['task_id']}: {row}  +{t['added_params']} params ({t['added_param_pct']:.2f}%)")
    print(f"aggregate multiplier {report['multiplier']:.4f}x")
    return 0


def cmd_eval(args):
    if not os.path.exists(args.store):
        raise UsageError(f"--store: checkpoint not found: {args.store}")
    store = ModelStore(args.store)
    rows = []
    if args.random_head:
        if not args.data:
            raise UsageError("--random-head needs --data")
        ds = _load(args.data, args.split, args.seed or 0, "--data")
        net = TaskNetwork(store.base, ds.num_classes, task_id="base", seed=args.seed or 0, gates="off")
        rows.append({"task_id": "base(random head)", "data": args.data, "accuracy": accuracy(net, ds)})
    else:
        ids = args.task or store.tasks()
        if not ids:
            raise UsageError("the checkpoint holds no tasks; pass --random-head to evaluate the bare base")
        for tid in ids:
            delta = store.load_task(tid)
            spec = args.data or delta.metadata.get("data")
            if spec is None:
                raise UsageError(f"task {tid!r} does not record its dataset; pass --data")
            seed = args.seed if args.seed is not None else delta.metadata.get("data_seed", 0)
            ds = _load(spec, args.split, seed, "--data")
            rows.append({"task_id": tid, "data": spec, "accuracy": accuracy(store.compose(tid), ds)})
    for r in rows:
        print(f"{r['task_id']}\t{r['data']}\t{r['accuracy']:.2f}")
    if args.out:
        _dump_json(args.out, {"split": args.split, "results": rows})
    return 0


# -- parser ------------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--lambda", dest="lam", type=float, help="sparsity weight")
    p.add_argument("--tau", type=float, help="gate threshold (default 0.1)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int, help="seeds training and the synthetic suite")
    p.add_argument("--config", help="key = value file; flags win over its values")


def _add_base_flags(p):
    p.add_argument("--store", help="existing checkpoint whose base to start from")
    p.add_argument("--base-task", default="synth:base", help="task used to pretrain a base when --store is absent")
    p.add_argument("--base-epochs", type=int, default=30)
    p.add_argument("--arch", choices=("cnn", "vit"), default="cnn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taps", description="Task-adaptive parameter sharing toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic task split as a TIMG file")
    p.add_argument("--task", required=True, help=f"one of {', '.join(SUITE_TASKS)}")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="train a base model and start a checkpoint")
    p.add_argument("--task", default="synth:base", help="synth:<task> or timg:<path>")
    p.add_argument("--arch", choices=("cnn", "vit"), default="cnn")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train task deltas under one regime")
    p.add_argument("--regime", choices=REGIMES, default="incremental")
    p.add_argument("--task", action="append", help="synth:<task> or timg:<path>; repeatable")
    p.add_argument("--eval-data", action="append", help="held-out data per --task (timg tasks)")
    _add_training_flags(p)
    _add_base_flags(p)
    p.add_argument("--out", default="taps_out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per lambda and write the frontier")
    p.add_argument("--task", required=True)
    p.add_argument("--grid", default=",".join(f"{g:g}" for g in DEFAULT_LAMBDA_GRID))
    _add_training_flags(p)
    _add_base_flags(p)
    p.add_argument("--out", default="taps_sweep", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="parameter report and sharing map for a checkpoint")
    p.add_argument("--store", required=True)
    p.add_argument("--out", default="taps_report", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="accuracy of stored tasks")
    p.add_argument("--store", required=True)
    p.add_argument("--task", action="append", help="task id; repeatable (default: all)")
    p.add_argument("--data", help="dataset to evaluate on instead of the recorded one")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--random-head", action="store_true", help="evaluate the bare base with a random head")
    p.add_argument("--out", help="write results as JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"taps: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"taps: training aborted: {exc}", file=sys.stderr)
        return 1
    except TapsError as exc:
        print(f"taps: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
