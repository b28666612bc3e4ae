"""Inner-loop adaptation, first-order meta-gradients, meta-training,
the joint-training baseline, and reset-safe evaluation.

The update operator is plain SGD on the composite loss over small batches
sampled with replacement, with augmentation and dropout governed by
:class:`UpdateHyperparams`.  Meta-gradients are parameter differences:
``theta_both - theta`` for Reptile and ``theta_val - theta_tr`` for the
FOMAML variants, which differ only in how the two mini-sets are sampled.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses, model, ops
from .ops import ContractViolation
from .tasks import augment, sample_episode


@dataclass(frozen=True)
class UpdateHyperparams:
    """Hyperparameters of the gradient-based update routine."""

    lr: float = 0.005
    steps: int = 5
    inner_batch: int = 8
    dropout_rate: float = 0.2
    aug_rate: float = 0.5
    l2_lambda: float = 5e-4
    mode_tag: str = "train"

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractViolation(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ContractViolation(f"steps must be >= 0, got {self.steps}")
        if self.inner_batch < 1:
            raise ContractViolation("inner_batch must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must be in [0, 1)")
        if not 0.0 <= self.aug_rate <= 1.0:
            raise ContractViolation("aug_rate must be in [0, 1]")
        if self.l2_lambda < 0:
            raise ContractViolation("l2_lambda must be nonnegative")
        if self.mode_tag not in ("train", "test"):
            raise ContractViolation(f"unknown mode_tag {self.mode_tag!r}")


@dataclass
class MetaConfig:
    """Outer-loop configuration; defaults are desk-scale."""

    algorithm: str = "fomaml_star"  # reptile | fomaml_disjoint | fomaml_star
    meta_batch: int = 5
    meta_steps: int = 2000
    meta_lr_initial: float = 0.1
    meta_lr_final: float = 1e-5
    train_shots: int = 5
    val_shots: int = 5
    inner: UpdateHyperparams = field(default_factory=UpdateHyperparams)
    model: model.ModelConfig = field(default_factory=model.ModelConfig)

    def meta_lr(self, step):
        """Linear decay from the initial to the final rate across all steps."""
        if self.meta_steps <= 1:
            return self.meta_lr_initial
        frac = step / (self.meta_steps - 1)
        return self.meta_lr_initial + frac * (self.meta_lr_final - self.meta_lr_initial)


@dataclass
class JointConfig:
    """Standard (non-episodic) training loop configuration."""

    epochs: int = 200
    batch_size: int = 8
    lr: float = 0.005
    l2_lambda: float = 5e-4
    aug_rate: float = 0.5
    model: model.ModelConfig = field(default_factory=model.ModelConfig)


@dataclass
class MetaGradient:
    """Per-parameter delta tensors aligned with the initialization, plus the
    adapted state needed by the outer loop (running statistics carried along
    and the episode for loss logging)."""

    delta: dict
    adapted_stats: dict
    adapted: model.ParameterSet | None = None
    episode_data: list | None = None


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

def batch_loss_and_grads(params, examples, omega, rng):
    """Composite loss and its full parameter gradient on one batch.

    Runs a train-mode forward (committing running statistics into
    ``params``), backpropagates the data terms through the network, and adds
    the direct L2 contribution.  Returns (LossBreakdown, grads).
    """
    images = np.stack([e.image for e in examples])
    masks = np.stack([e.mask for e in examples])
    probs, cache = model.forward(params, images, mode="train", rng=rng,
                                 dropout_rate=omega.dropout_rate,
                                 want_cache=True)
    breakdown, grad_yhat, grad_l2 = losses.composite_loss(
        masks, probs[:, 1], params, lam=omega.l2_lambda)
    grad_probs = np.zeros_like(probs)
    grad_probs[:, 1] = grad_yhat
    grads = model.backward(params, cache, grad_probs)
    for name, g in grad_l2.items():
        grads[name] = grads[name] + g
    return breakdown, grads


def _adapt_step(params, data, omega, rng, grad_fn):
    """One SGD step on a batch sampled with replacement from ``data``.

    Consumes the rng in a fixed order: batch indices, then per-example
    augmentation draws (skipped entirely at aug_rate 0), then dropout.
    """
    n = len(data)
    idx = rng.integers(0, n, size=min(omega.inner_batch, n))
    batch = [data[i] for i in idx]
    if omega.aug_rate > 0.0:
        batch = [augment(e, omega.aug_rate, rng) for e in batch]
    _, grads = grad_fn(params, batch, omega, rng)
    return ops.sgd_step(params, grads, omega.lr)


def inner_update(theta, data, omega, rng, grad_fn=None):
    """Adapt ``theta`` with ``omega.steps`` SGD steps on ``data``.

    The input is never mutated; the returned parameters carry the running
    statistics accumulated during adaptation.  ``grad_fn`` defaults to the
    segmentation network's :func:`batch_loss_and_grads` and exists so toy
    models can run through the identical update path.
    """
    if not data:
        raise ContractViolation("inner_update needs a non-empty dataset")
    grad_fn = grad_fn or batch_loss_and_grads
    params = theta.copy()
    for _ in range(omega.steps):
        params = _adapt_step(params, data, omega, rng, grad_fn)
    return params


# ---------------------------------------------------------------------------
# meta-gradients
# ---------------------------------------------------------------------------

def _param_delta(after, before):
    a = dict(after.param_items())
    return {name: a[name] - v for name, v in before.param_items()}


def reptile_meta_grad(theta, task, omega, rng, train_shots=5, grad_fn=None):
    """theta_both - theta after adapting on a single joint mini-set."""
    n = len(task.examples)
    if n < train_shots:
        raise ContractViolation(
            f"task {task.id} has {n} examples, needs {train_shots}")
    idx = rng.choice(n, size=train_shots, replace=False)
    data = [task.examples[i] for i in idx]
    theta_both = inner_update(theta, data, omega, rng, grad_fn=grad_fn)
    return MetaGradient(delta=_param_delta(theta_both, theta),
                        adapted_stats=theta_both.running_stats,
                        adapted=theta_both, episode_data=data)


def fomaml_meta_grad(theta, task, omega, sampling_mode, rng,
                     train_shots=5, val_shots=5, grad_fn=None):
    """theta_val - theta_tr across a two-phase episode.

    ``sampling_mode`` "disjoint" is classic first-order MAML; the
    "with_replacement_union" variant draws both mini-sets with replacement
    from the whole pool.  The validation phase takes a single SGD step, so
    the returned delta equals -lr times the validation-batch gradient at
    theta_tr.
    """
    episode = sample_episode(task, train_shots, val_shots, sampling_mode, rng)
    theta_tr = inner_update(theta, episode.train, omega, rng, grad_fn=grad_fn)
    omega_val = dataclasses.replace(omega, steps=1)
    theta_val = inner_update(theta_tr, episode.val, omega_val, rng,
                             grad_fn=grad_fn)
    return MetaGradient(delta=_param_delta(theta_val, theta_tr),
                        adapted_stats=theta_val.running_stats,
                        adapted=theta_val,
                        episode_data=episode.train + episode.val)


def _task_meta_grad(theta, task, config, rng):
    if config.algorithm == "reptile":
        return reptile_meta_grad(theta, task, config.inner, rng,
                                 train_shots=config.train_shots)
    if config.algorithm == "fomaml_disjoint":
        return fomaml_meta_grad(theta, task, config.inner, "disjoint", rng,
                                train_shots=config.train_shots,
                                val_shots=config.val_shots)
    if config.algorithm == "fomaml_star":
        return fomaml_meta_grad(theta, task, config.inner,
                                "with_replacement_union", rng,
                                train_shots=config.train_shots,
                                val_shots=config.val_shots)
    raise ContractViolation(f"unknown algorithm {config.algorithm!r}")


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_iou(params, examples):
    """Mean per-example IoU of hard predicted masks against the labels."""
    images = np.stack([e.image for e in examples])
    masks = np.stack([e.mask for e in examples])
    pred = model.predict_mask(params, images)
    return float(np.mean([losses.soft_iou(m, p)
                          for m, p in zip(masks, pred)]))


def evaluate_loss(params, examples, omega):
    """Composite loss in inference mode (no dropout, no augmentation)."""
    images = np.stack([e.image for e in examples])
    masks = np.stack([e.mask for e in examples])
    probs = model.forward(params, images, mode="inference")
    breakdown, _, _ = losses.composite_loss(masks, probs[:, 1], params,
                                            lam=omega.l2_lambda)
    return breakdown.total


# ---------------------------------------------------------------------------
# outer loops
# ---------------------------------------------------------------------------

def meta_train(train_tasks, config, rng, checkpoint_sink=None,
               checkpoint_every=500, log_sink=None, threads=1):
    """Meta-train an initialization from scratch.

    Each meta-step samples ``meta_batch`` tasks with replacement, computes
    per-task meta-gradients on pre-spawned rng streams (so sequential and
    threaded runs agree bitwise), averages them in task-slot order, and
    moves the initialization by the linearly decayed meta-learning rate.
    Running statistics travel with the same interpolation toward the
    adapted statistics.  ``log_sink(step, meta_lr, loss)`` receives the
    post-update loss on each step's episodes.
    """
    if not train_tasks:
        raise ContractViolation("meta_train needs a non-empty task set")
    theta = model.build_model(config.model, rng)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(config.meta_steps):
            lr = config.meta_lr(step)
            task_idx = rng.integers(0, len(train_tasks), size=config.meta_batch)
            streams = rng.spawn(config.meta_batch)
            jobs = [(train_tasks[i], streams[j])
                    for j, i in enumerate(task_idx)]
            if executor is not None:
                results = list(executor.map(
                    lambda job: _task_meta_grad(theta, job[0], config, job[1]),
                    jobs))
            else:
                results = [_task_meta_grad(theta, task, config, stream)
                           for task, stream in jobs]

            for name, value in theta.param_items():
                avg = sum(r.delta[name] for r in results) / len(results)
                theta.set(name, value + lr * avg)
            for key, value in theta.running_stats.items():
                avg = sum(r.adapted_stats[key] for r in results) / len(results)
                theta.running_stats[key] = value + lr * (avg - value)

            if log_sink is not None:
                loss = float(np.mean([
                    evaluate_loss(r.adapted, r.episode_data, config.inner)
                    for r in results]))
                log_sink(step, lr, loss)
            if checkpoint_sink is not None and (step + 1) % checkpoint_every == 0:
                checkpoint_sink(step, theta)
    finally:
        if executor is not None:
            executor.shutdown()
    return theta


def joint_train(tasks, config, rng, log_sink=None):
    """Train one multi-class model on all tasks at once.

    The head predicts one channel per task plus background; batches mix
    examples from every task.  The learning rate decays linearly per epoch.
    The returned parameters have the head re-initialized to a fresh binary
    2-channel head so the result can be adapted and evaluated on binary
    tasks; all other blocks are returned exactly as trained.
    """
    if not tasks:
        raise ContractViolation("joint_train needs a non-empty task set")
    n_classes = len(tasks) + 1
    mcfg = dataclasses.replace(config.model, num_output_channels=n_classes)
    theta = model.build_model(mcfg, rng)
    pool = [(ti, ex) for ti, task in enumerate(tasks) for ex in task.examples]

    for epoch in range(config.epochs):
        lr = config.lr * (1.0 - epoch / config.epochs)
        order = rng.permutation(len(pool))
        batch_losses = []
        for start in range(0, len(pool), config.batch_size):
            chosen = [pool[i] for i in order[start:start + config.batch_size]]
            examples = [augment(ex, config.aug_rate, rng) if config.aug_rate > 0
                        else ex for _, ex in chosen]
            images = np.stack([e.image for e in examples])
            onehot = np.zeros((len(chosen), n_classes) + examples[0].mask.shape)
            for row, ((ti, _), ex) in enumerate(zip(chosen, examples)):
                onehot[row, ti + 1] = ex.mask
                onehot[row, 0] = 1.0 - ex.mask
            probs, cache = model.forward(theta, images, mode="train", rng=rng,
                                         want_cache=True)
            ce = losses.cross_entropy(onehot, probs)
            total = ce + config.l2_lambda * losses.l2_norm_sq(theta)
            grads = model.backward(
                theta, cache, losses.cross_entropy_grad(onehot, probs))
            if config.l2_lambda != 0.0:
                for name, value in theta.param_items():
                    grads[name] = grads[name] + 2.0 * config.l2_lambda * value
            theta = ops.sgd_step(theta, grads, lr)
            batch_losses.append(total)
        if log_sink is not None:
            log_sink(epoch, lr, float(np.mean(batch_losses)))

    return model.reinit_head(theta, 2, rng)


# ---------------------------------------------------------------------------
# reset-safe evaluation
# ---------------------------------------------------------------------------

def adapt_and_eval(theta, task, omega, eval_split, rng):
    """Adapt to a k-shot subset, score hard-mask IoU on the held-out subset,
    and leave ``theta`` (running statistics included) bitwise unchanged.

    ``eval_split`` is a pair (train_indices, eval_indices) of disjoint index
    sequences into the task's example pool.
    """
    train_idx, eval_idx = eval_split
    if set(train_idx) & set(eval_idx):
        raise ContractViolation("train and eval indices must be disjoint")
    snapshot = theta.copy()
    try:
        adapted = inner_update(theta, [task.examples[i] for i in train_idx],
                               omega, rng)
        iou = evaluate_iou(adapted, [task.examples[i] for i in eval_idx])
    finally:
        theta.restore(snapshot)
    return iou, omega.steps


def evaluate_initialization(theta, tasks, omega, k, splits, rng):
    """Protocol evaluation: per task, ``splits`` random k-shot train /
    remainder-test partitions, each scored with adapt_and_eval."""
    rows = []
    for task in tasks:
        n = len(task.examples)
        if n <= k:
            raise ContractViolation(
                f"task {task.id} has {n} examples, needs more than k={k}")
        for split_id in range(splits):
            perm = rng.permutation(n)
            split = (perm[:k].tolist(), perm[k:].tolist())
            iou, _ = adapt_and_eval(theta, task, omega, split, rng)
            rows.append((task.id, split_id, iou))
    return losses.make_eval_report(rows)
