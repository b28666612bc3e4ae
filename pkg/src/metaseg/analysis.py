"""Diagnostics: weight-travel distances, the empirical generalization gap,
and the k-shot scaling curve comparing initializations."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import losses, meta, uho
from .ops import ContractViolation


@dataclass
class DistanceReport:
    """Distances between an initialization and its task-adapted weights.

    ``d1`` is the Euclidean distance between whole parameter vectors;
    per block, ``d2`` is the Euclidean distance between unit-normalized
    block subvectors (None when a block has zero norm) and ``d3`` the mean
    absolute difference.  Running statistics are excluded throughout.
    """

    d1: float
    per_block: list  # (block name, d2 or None, d3)


@dataclass
class DistanceStudySummary:
    d1_rows: list          # (init tag, task id, repeat, d1)
    block_rows: list       # (init tag, block, mean d2, mean d3)
    per_init: dict         # tag -> (mean d1, ci95 halfwidth, n)


@dataclass
class GapReport:
    per_task: list         # (task id, gap)
    mean: float
    ci95_halfwidth: float
    n: int
    task_level_gap: float | None = None


@dataclass
class KShotCurve:
    k_values: list
    rows: list             # (init tag, k, task id, repeat, iou)
    summaries: dict        # (tag, k) -> (mean, ci95 halfwidth, n)


def weight_distances(theta, theta_tau):
    """Distance report between two structurally identical parameter sets."""
    names_a = [(n, v.shape) for n, v in theta.param_items()]
    names_b = [(n, v.shape) for n, v in theta_tau.param_items()]
    if names_a != names_b:
        raise ContractViolation("parameter structures differ")
    d1 = float(np.linalg.norm(theta.flatten() - theta_tau.flatten()))
    per_block = []
    for bname in theta.blocks:
        v = theta.block_vector(bname)
        u = theta_tau.block_vector(bname)
        nv, nu = np.linalg.norm(v), np.linalg.norm(u)
        d2 = float(np.linalg.norm(v / nv - u / nu)) if nv > 0 and nu > 0 else None
        d3 = float(np.mean(np.abs(v - u)))
        per_block.append((bname, d2, d3))
    return DistanceReport(d1=d1, per_block=per_block)


def distance_study(inits, test_tasks, omega, repeats, rng):
    """Adapt each tagged initialization to each task and measure how far the
    weights travel.

    Every (task, repeat) draws a fresh k-shot training subset, adapts with
    ``omega``, and records a :func:`weight_distances` report.  Returns raw
    d1 rows, per-block d2/d3 means, and per-init d1 mean with a 95% CI.
    """
    if not test_tasks:
        raise ContractViolation("distance_study needs tasks")
    shots = 5
    d1_rows = []
    block_acc = {}
    per_init = {}
    for tag, theta in inits:
        d1s = []
        for task in test_tasks:
            for rep in range(repeats):
                perm = rng.permutation(len(task.examples))
                train = [task.examples[i] for i in perm[:shots]]
                adapted = meta.inner_update(theta, train, omega, rng)
                report = weight_distances(theta, adapted)
                d1_rows.append((tag, task.id, rep, report.d1))
                d1s.append(report.d1)
                for bname, d2, d3 in report.per_block:
                    acc = block_acc.setdefault((tag, bname), ([], []))
                    if d2 is not None:
                        acc[0].append(d2)
                    acc[1].append(d3)
        mean, half = losses.mean_iou_ci(d1s)
        per_init[tag] = (mean, half, len(d1s))
    block_rows = [(tag, bname,
                   float(np.mean(d2s)) if d2s else float("nan"),
                   float(np.mean(d3s)))
                  for (tag, bname), (d2s, d3s) in block_acc.items()]
    return DistanceStudySummary(d1_rows=d1_rows, block_rows=block_rows,
                                per_init=per_init)


def within_task_gap(theta, task, train_idx, heldout_idx, omega, rng):
    """Adapted loss on held-out shots minus adapted loss on the training
    shots; exactly zero when the two index sets coincide."""
    train = [task.examples[i] for i in train_idx]
    heldout = [task.examples[i] for i in heldout_idx]
    adapted = meta.inner_update(theta, train, omega, rng)
    return (meta.evaluate_loss(adapted, heldout, omega)
            - meta.evaluate_loss(adapted, train, omega))


def generalization_gap(theta, tasks, omega, rng, shots=5, train_tasks=None):
    """Empirical within-task generalization gap across tasks.

    Each task's pool is split into ``shots`` adaptation examples and
    held-out examples.  When ``train_tasks`` is given, the report also
    carries the task-level component: mean adapted held-out loss on
    ``tasks`` minus the same quantity on ``train_tasks``.
    """
    rows = []
    heldout_losses = []
    for task in tasks:
        perm = rng.permutation(len(task.examples))
        train_idx, heldout_idx = perm[:shots].tolist(), perm[shots:].tolist()
        gap = within_task_gap(theta, task, train_idx, heldout_idx, omega, rng)
        rows.append((task.id, gap))
        adapted = meta.inner_update(
            theta, [task.examples[i] for i in train_idx], omega, rng)
        heldout_losses.append(meta.evaluate_loss(
            adapted, [task.examples[i] for i in heldout_idx], omega))
    gaps = [g for _, g in rows]
    mean, half = losses.mean_iou_ci(gaps)

    task_level = None
    if train_tasks is not None:
        ref = []
        for task in train_tasks:
            perm = rng.permutation(len(task.examples))
            adapted = meta.inner_update(
                theta, [task.examples[i] for i in perm[:shots]], omega, rng)
            ref.append(meta.evaluate_loss(
                adapted, [task.examples[i] for i in perm[shots:]], omega))
        task_level = float(np.mean(heldout_losses) - np.mean(ref))
    report = GapReport(per_task=rows, mean=mean, ci95_halfwidth=half,
                       n=len(rows), task_level_gap=task_level)
    return mean, report


def kshot_curve(inits, tasks, k_values, repeats, rng, omega_base,
                omega_small_k=None, max_steps=40, patience=10, test_size=20):
    """IoU as a function of the training-set size k for several
    initializations.

    For k below 10 each run adapts with the per-init tuned hyperparameters
    from ``omega_small_k`` (falling back to ``omega_base``).  For k of 10
    and above, 20% of the k training examples are carved out to drive early
    stopping at the fixed base learning rate, and the weights from the best
    step are evaluated.  Every run scores a disjoint ``test_size``-example
    test set; results aggregate to mean and 95% CI per (init, k).
    """
    k_values = sorted(k_values)
    need = max(k_values) + test_size
    for task in tasks:
        if len(task.examples) < need:
            raise ContractViolation(
                f"task {task.id} has {len(task.examples)} examples, "
                f"k-shot curve needs {need}")
    omega_small_k = omega_small_k or {}
    rows = []
    for tag, theta in inits:
        for k in k_values:
            for task in tasks:
                for rep in range(repeats):
                    perm = rng.permutation(len(task.examples))
                    test = [task.examples[i] for i in perm[:test_size]]
                    train = [task.examples[i] for i in perm[test_size:test_size + k]]
                    if k < 10:
                        omega = omega_small_k.get(tag, omega_base)
                        adapted = meta.inner_update(theta, train, omega, rng)
                    else:
                        n_val = max(1, round(0.2 * k))
                        omega = dataclasses.replace(omega_base,
                                                    steps=max_steps,
                                                    mode_tag="test")
                        _, _, adapted = uho.early_stopping_run(
                            theta, train[n_val:], train[:n_val], omega,
                            patience, max_steps, rng, keep_params=True)
                    rows.append((tag, k, task.id, rep,
                                 meta.evaluate_iou(adapted, test)))
    summaries = {}
    for tag, _ in inits:
        for k in k_values:
            scores = [iou for t, kk, _, _, iou in rows if t == tag and kk == k]
            mean, half = losses.mean_iou_ci(scores)
            summaries[(tag, k)] = (mean, half, len(scores))
    return KShotCurve(k_values=list(k_values), rows=rows, summaries=summaries)
