"""Command-line entry points for the full pipeline.

Every command takes ``--seed`` and is bit-reproducible: identical flags and
seed give byte-identical CSVs, checkpoints, and datasets.  Wall-clock
timestamps are confined to the ``run_meta.json`` sidecar each command
writes next to its outputs.  Flag values override config-file keys, which
override built-in defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, meta, model, tasks, uho
from .ops import ContractViolation

DESK_NOTE = "(desk-scale default; see README for paper-scale values)"


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master rng seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config file; flags override its keys")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-task meta-gradients")


def _add_task_source(p, families=24, examples=10, hw=32):
    p.add_argument("--dataset", type=Path, default=None,
                   help="load tasks from a PGM dataset directory instead of "
                        "generating them")
    p.add_argument("--families", type=int, default=families,
                   help="synthetic task families")
    p.add_argument("--examples", type=int, default=examples,
                   help="examples per synthetic task")
    p.add_argument("--hw", type=int, default=hw, help="image size")
    p.add_argument("--task-seed", type=int, default=0,
                   help="seed of the synthetic task generator")
    p.add_argument("--split-fractions", type=str, default="0.6,0.2,0.2",
                   help="train,val,test task fractions")
    p.add_argument("--split-seed", type=int, default=0)


def _add_model(p):
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--encoder-stages", type=int, default=3)
    p.add_argument("--rsd-skip-stage", type=int, default=2)
    p.add_argument("--rsd-out-channels", type=int, default=16)


def _add_inner(p):
    p.add_argument("--inner-lr", type=float, default=0.005)
    p.add_argument("--inner-steps", type=int, default=5)
    p.add_argument("--inner-batch", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--aug-rate", type=float, default=0.5)
    p.add_argument("--l2", type=float, default=5e-4)


def _load_tasks(args):
    if args.dataset is not None:
        library = tasks.load_dataset(args.dataset)
        if not library:
            raise ContractViolation(f"no tasks found in {args.dataset}")
        hw = library[0].examples[0].mask.shape[0]
    else:
        library = tasks.generate_task_library(
            args.families, args.examples, args.hw, args.task_seed)
        hw = args.hw
    fractions = tuple(float(f) for f in args.split_fractions.split(","))
    split = tasks.split_tasks(library, fractions, args.split_seed)
    return library, split, hw


def _model_config(args, hw, num_outputs=2):
    return model.ModelConfig(
        input_hw=hw, base_channels=args.base_channels,
        encoder_stages=args.encoder_stages,
        rsd_skip_stage=args.rsd_skip_stage,
        rsd_out_channels=args.rsd_out_channels,
        dropout_rate=args.dropout, num_output_channels=num_outputs)


def _omega(args, mode_tag="train"):
    return meta.UpdateHyperparams(
        lr=args.inner_lr, steps=args.inner_steps,
        inner_batch=args.inner_batch, dropout_rate=args.dropout,
        aug_rate=args.aug_rate, l2_lambda=args.l2, mode_tag=mode_tag)


def _write_run_meta(args, extra=None):
    args.out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command,
              "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
              "flags": {k: str(v) for k, v in vars(args).items()
                        if k not in ("func", "config")}}
    record.update(extra or {})
    (args.out / "run_meta.json").write_text(json.dumps(record, indent=2) + "\n")


def _load_omega_file(path):
    data = json.loads(Path(path).read_text())
    return meta.UpdateHyperparams(**data)


def _save_omega_file(path, omega):
    Path(path).write_text(
        json.dumps(dataclasses.asdict(omega), indent=2, sort_keys=True) + "\n")


def _parse_inits(pairs):
    inits = []
    for spec in pairs:
        if "=" not in spec:
            raise ContractViolation(f"--init expects tag=path, got {spec!r}")
        tag, path = spec.split("=", 1)
        inits.append((tag, checkpoint.load_checkpoint(path)))
    return inits


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_tasks(args):
    library = tasks.generate_task_library(
        args.families, args.examples, args.hw, args.task_seed)
    args.out.mkdir(parents=True, exist_ok=True)
    tasks.save_dataset(library, args.out / "dataset")
    _write_run_meta(args, {"num_tasks": len(library)})
    print(f"wrote {len(library)} tasks to {args.out / 'dataset'}")
    return 0


def cmd_meta_train(args):
    library, split, hw = _load_tasks(args)
    train_tasks = tasks.select_tasks(library, split.train_tasks)
    if not train_tasks:
        raise ContractViolation("train split is empty")
    config = meta.MetaConfig(
        algorithm=args.algorithm, meta_batch=args.meta_batch,
        meta_steps=args.meta_steps, meta_lr_initial=args.meta_lr_initial,
        meta_lr_final=args.meta_lr_final, train_shots=args.train_shots,
        val_shots=args.val_shots, inner=_omega(args),
        model=_model_config(args, hw))
    args.out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    rng = np.random.default_rng(args.seed)

    def sink(step, theta):
        checkpoint.save_checkpoint(args.out / f"checkpoint_{step + 1}.mlab", theta)

    theta = meta.meta_train(
        train_tasks, config, rng,
        checkpoint_sink=sink, checkpoint_every=args.checkpoint_every,
        log_sink=lambda s, lr, loss: log_rows.append((s, lr, loss)),
        threads=args.threads)
    checkpoint.save_checkpoint(args.out / "checkpoint.mlab", theta)
    checkpoint.write_csv(args.out / "metatrain_log.csv",
                         ("step", "meta_lr", "loss"), log_rows)
    _write_run_meta(args, {"train_tasks": split.train_tasks,
                           "val_tasks": split.val_tasks,
                           "test_tasks": split.test_tasks})
    print(f"meta-trained {args.algorithm} for {config.meta_steps} steps -> "
          f"{args.out / 'checkpoint.mlab'}")
    return 0


def cmd_joint_train(args):
    library, split, hw = _load_tasks(args)
    train_tasks = tasks.select_tasks(library, split.train_tasks)
    if not train_tasks:
        raise ContractViolation("train split is empty")
    config = meta.JointConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        l2_lambda=args.l2, aug_rate=args.aug_rate,
        model=_model_config(args, hw))
    args.out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    rng = np.random.default_rng(args.seed)
    theta = meta.joint_train(
        train_tasks, config, rng,
        log_sink=lambda e, lr, loss: log_rows.append((e, lr, loss)))
    checkpoint.save_checkpoint(args.out / "checkpoint.mlab", theta)
    checkpoint.write_csv(args.out / "jointtrain_log.csv",
                         ("epoch", "lr", "loss"), log_rows)
    _write_run_meta(args, {"joint_num_classes": len(train_tasks) + 1,
                           "train_tasks": split.train_tasks})
    print(f"joint-trained {len(train_tasks)} classes (+background) -> "
          f"{args.out / 'checkpoint.mlab'}")
    return 0


def cmd_uho(args):
    theta = checkpoint.load_checkpoint(args.checkpoint)
    library, split, _ = _load_tasks(args)
    val_tasks = tasks.select_tasks(library, split.val_tasks)
    if not val_tasks:
        raise ContractViolation("validation split is empty")
    space = uho.SearchSpace(extended=args.extended, max_steps=args.max_steps)
    result = uho.uho_optimize(
        theta, val_tasks, space, args.budget, np.random.default_rng(args.seed),
        omega_base=_omega(args, mode_tag="test"), shots=args.shots,
        repeats_per_task=args.repeats_per_task)
    args.out.mkdir(parents=True, exist_ok=True)
    _save_omega_file(args.out / "omega.json", result.omega_test)
    checkpoint.write_csv(
        args.out / "uho_trace.csv",
        ("cand_idx", "lr", "steps_median", "objective"),
        [(i, om.lr, med, obj) for i, (om, obj, med) in enumerate(result.trace)])
    _write_run_meta(args, {"best_objective": result.best_objective,
                           "best_index": result.best_index})
    print(f"best candidate {result.best_index}: lr={result.omega_test.lr:.6g} "
          f"steps={result.omega_test.steps} "
          f"objective={result.best_objective:.4f}")
    return 0


def cmd_evaluate(args):
    theta = checkpoint.load_checkpoint(args.checkpoint)
    library, split, _ = _load_tasks(args)
    test_tasks = tasks.select_tasks(library, split.test_tasks)
    if not test_tasks:
        raise ContractViolation("test split is empty")
    omega = (_load_omega_file(args.omega) if args.omega
             else _omega(args, mode_tag="test"))
    report = meta.evaluate_initialization(
        theta, test_tasks, omega, args.k, args.splits,
        np.random.default_rng(args.seed))
    rows = [(tid, sid, args.k, iou) for tid, sid, iou in report.per_task_scores]
    rows.append(("summary", args.splits, args.k, report.mean))
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint.write_csv(args.out / "eval.csv",
                         ("task_id", "split", "k", "iou"), rows)
    _write_run_meta(args, {"mean_iou": report.mean,
                           "ci95_halfwidth": report.ci95_halfwidth,
                           "n": report.n})
    print(f"{args.k}-shot mean IoU {report.mean:.4f} "
          f"+/- {report.ci95_halfwidth:.4f} over {report.n} splits")
    return 0


def cmd_fpk(args):
    inits = _parse_inits(args.init)
    library, split, _ = _load_tasks(args)
    test_tasks = tasks.select_tasks(library, split.test_tasks)
    val_tasks = tasks.select_tasks(library, split.val_tasks)
    k_values = [int(k) for k in args.k_values.split(",")]
    rng = np.random.default_rng(args.seed)
    omega_base = _omega(args, mode_tag="test")

    omega_small = {}
    if args.uho_budget > 0 and any(k < 10 for k in k_values):
        space = uho.SearchSpace(max_steps=args.max_steps)
        for tag, theta in inits:
            result = uho.uho_optimize(theta, val_tasks, space,
                                      args.uho_budget, rng,
                                      omega_base=omega_base)
            omega_small[tag] = result.omega_test

    curve = analysis.kshot_curve(
        inits, test_tasks, k_values, args.repeats, rng, omega_base,
        omega_small_k=omega_small, max_steps=args.max_steps,
        patience=args.patience)
    rows = [(tag, k, tid, rep, iou, "")
            for tag, k, tid, rep, iou in curve.rows]
    for (tag, k), (mean, half, n) in sorted(curve.summaries.items()):
        rows.append((tag, k, "summary", n, mean, half))
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint.write_csv(args.out / "fpk.csv",
                         ("init_tag", "k", "task_id", "repeat", "iou", "ci95"),
                         rows)
    _write_run_meta(args)
    for (tag, k), (mean, half, _) in sorted(curve.summaries.items()):
        print(f"{tag} k={k}: {mean:.4f} +/- {half:.4f}")
    return 0


def cmd_analyze_weights(args):
    inits = _parse_inits(args.init)
    library, split, _ = _load_tasks(args)
    test_tasks = tasks.select_tasks(library, split.test_tasks)
    omega = _omega(args, mode_tag="test")
    summary = analysis.distance_study(
        inits, test_tasks, omega, args.repeats, np.random.default_rng(args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint.write_csv(args.out / "distances.csv",
                         ("init_tag", "task_id", "repeat", "d1"),
                         summary.d1_rows)
    checkpoint.write_csv(args.out / "distance_blocks.csv",
                         ("init_tag", "block", "d2", "d3"),
                         summary.block_rows)
    _write_run_meta(args, {"per_init": {t: list(v)
                                        for t, v in summary.per_init.items()}})
    for tag, (mean, half, n) in summary.per_init.items():
        print(f"{tag}: mean d1 {mean:.4f} +/- {half:.4f} (n={n})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="metaseg",
        description="Meta-learning for few-shot binary segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("gen-tasks", help="generate a synthetic task dataset")
    _add_common(p)
    _add_task_source(p)
    p.set_defaults(func=cmd_gen_tasks)
    commands["gen-tasks"] = p

    p = sub.add_parser("meta-train",
                       help=f"meta-train an initialization {DESK_NOTE}")
    _add_common(p)
    _add_task_source(p)
    _add_model(p)
    _add_inner(p)
    p.add_argument("--algorithm", default="fomaml_star",
                   choices=("reptile", "fomaml_disjoint", "fomaml_star"))
    p.add_argument("--meta-steps", type=int, default=2000,
                   help=f"meta-iterations {DESK_NOTE}; paper scale 50000")
    p.add_argument("--meta-batch", type=int, default=5)
    p.add_argument("--meta-lr-initial", type=float, default=0.1)
    p.add_argument("--meta-lr-final", type=float, default=1e-5)
    p.add_argument("--train-shots", type=int, default=5)
    p.add_argument("--val-shots", type=int, default=5)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.set_defaults(func=cmd_meta_train)
    commands["meta-train"] = p

    p = sub.add_parser("joint-train", help="multi-class joint-training baseline")
    _add_common(p)
    _add_task_source(p)
    _add_model(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--l2", type=float, default=5e-4)
    p.add_argument("--aug-rate", type=float, default=0.5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.set_defaults(func=cmd_joint_train)
    commands["joint-train"] = p

    p = sub.add_parser("uho", help="optimize test-time update hyperparameters")
    _add_common(p)
    _add_task_source(p)
    _add_inner(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--budget", type=int, default=16,
                   help=f"candidates to evaluate {DESK_NOTE}; paper scale 30")
    p.add_argument("--max-steps", type=int, default=20)
    p.add_argument("--extended", action="store_true",
                   help="also tune dropout, augmentation rate, and batch size")
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--repeats-per-task", type=int, default=1)
    p.set_defaults(func=cmd_uho)
    commands["uho"] = p

    p = sub.add_parser("evaluate", help="k-shot evaluation on test tasks")
    _add_common(p)
    _add_task_source(p)
    _add_inner(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--omega", type=Path, default=None,
                   help="update hyperparameters JSON (from the uho command)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--splits", type=int, default=2)
    p.set_defaults(func=cmd_evaluate)
    commands["evaluate"] = p

    p = sub.add_parser("fpk", help="k-shot scaling curve across initializations")
    _add_common(p)
    _add_task_source(p, families=6, examples=50)
    _add_inner(p)
    p.add_argument("--init", action="append", required=True,
                   metavar="TAG=CHECKPOINT")
    p.add_argument("--k-values", type=str, default="1,5,10,25")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--max-steps", type=int, default=40)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--uho-budget", type=int, default=6,
                   help="budget of the per-init tuning pass for k < 10 "
                        "(0 uses the base hyperparameters)")
    p.set_defaults(func=cmd_fpk)
    commands["fpk"] = p

    p = sub.add_parser("analyze-weights",
                       help="distance travelled during adaptation")
    _add_common(p)
    _add_task_source(p)
    _add_inner(p)
    p.add_argument("--init", action="append", required=True,
                   metavar="TAG=CHECKPOINT")
    p.add_argument("--repeats", type=int, default=8)
    p.set_defaults(func=cmd_analyze_weights)
    commands["analyze-weights"] = p

    return parser, commands


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {args.config}: {exc}",
                  file=sys.stderr)
            return 2
        sub = commands[args.command]
        valid = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - valid)
        if unknown:
            print(f"error: unknown config keys: {', '.join(unknown)}",
                  file=sys.stderr)
            return 2
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
