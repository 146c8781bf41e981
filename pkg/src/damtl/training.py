"""Losses, projected SGD, auxiliary pretraining, and the joint training loop.

Per batch, a task's loss is the summed cross-entropy plus lambda1 * sum of
mask L1 norms plus lambda2 * the alignment total. The joint objective is the
alpha-weighted sum over tasks; since tasks share no trainable parameters,
seeding each task's backward pass with alpha yields exactly the joint
gradients (the equality is asserted bit-for-bit in the tests). Masks are
projected onto the non-negative orthant after every step.

Tasks advance in lockstep rounds (one batch each per round). Rounds for
different tasks may run on a thread pool bounded by DAMTL_THREADS; tasks
share only the frozen auxiliary model, so results do not depend on the
worker count.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .alignment import alignment_total
from .autodiff import Tensor, add, backward, l1_norm, scale, softmax_cross_entropy
from .data import LabeledSet, TaskDataset, batches
from .errors import ConfigError, DataError
from .network import Architecture, AuxModel, TaskNetwork, init_task

# Batch-stream id for auxiliary pretraining, distinct from any task id.
_AUX_BATCH_STREAM_ID = 999983


@dataclass(frozen=True)
class TrainConfig:
    """Joint-training hyper-parameters (defaults follow the working set)."""

    learning_rate: float = 0.01
    lambda_l1: float = 0.9
    lambda_align: float = 0.9
    task_weight: float = 0.01
    batch_size: int = 32
    max_epochs: int = 100
    convergence_window: int = 5
    convergence_tol: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lambda_l1 < 0 or self.lambda_align < 0:
            raise ConfigError("lambda_l1 and lambda_align must be >= 0")
        if self.task_weight <= 0:
            raise ConfigError(f"task_weight must be > 0, got {self.task_weight}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.convergence_window < 2:
            raise ConfigError(f"convergence_window must be >= 2, got {self.convergence_window}")
        if self.convergence_tol <= 0:
            raise ConfigError(f"convergence_tol must be > 0, got {self.convergence_tol}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def replace(self, **kw) -> "TrainConfig":
        d = self.__dict__.copy()
        d.update(kw)
        return TrainConfig(**d)


@dataclass(frozen=True)
class PretrainConfig:
    """Auxiliary pretraining schedule: plain SGD on mean cross-entropy."""

    learning_rate: float = 0.05
    batch_size: int = 64
    max_epochs: int = 30
    convergence_window: int = 5
    convergence_tol: float = 1e-4

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"pretrain learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"pretrain batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"pretrain max_epochs must be >= 0, got {self.max_epochs}")


@dataclass
class EpochMetrics:
    """Per-task per-epoch log row.

    ce/l1/cmmd/total are means over the epoch's batch rounds of the per-batch
    loss components; total is assembled from the logged components, so
    total == ce + lambda1*l1 + lambda2*cmmd holds exactly.
    """

    epoch: int
    task: int
    ce: float
    l1: float
    cmmd: float
    total: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainResult:
    networks: list
    metrics: list
    joint_loss_history: list
    converged_epoch: int | None = None


@dataclass
class _TaskSums:
    ce: float = 0.0
    l1: float = 0.0
    cmmd: float = 0.0
    steps: int = 0
    seconds: float = 0.0


def worker_count(task_count: int) -> int:
    """Thread budget from DAMTL_THREADS (results never depend on it)."""
    raw = os.environ.get("DAMTL_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"DAMTL_THREADS must be an integer, got {raw!r}") from e
    return max(1, min(n, task_count))


def task_loss(net: TaskNetwork, batch, cfg: TrainConfig):
    """Eq.-style per-task loss on one batch: (graph node, float components).

    Terms with a zero weight are skipped entirely (the lambda2 = 0 run is the
    no-alignment ablation: its alignment value is not even computed).
    """
    x, y = batch
    want_align = cfg.lambda_align != 0.0
    fwd = net.forward(x, want_alignment=want_align)
    ce = softmax_cross_entropy(fwd.logits, y)
    loss = ce
    l1_value = float(sum(np.abs(m.data).sum() for m in net.masks))
    if cfg.lambda_l1 != 0.0:
        l1_term = l1_norm(net.masks[0])
        for m in net.masks[1:]:
            l1_term = add(l1_term, l1_norm(m))
        loss = add(loss, scale(l1_term, cfg.lambda_l1))
    cmmd_value = 0.0
    if want_align:
        align = alignment_total(fwd.fc_aux, fwd.fc_task, y)
        cmmd_value = float(align.data)
        loss = add(loss, scale(align, cfg.lambda_align))
    components = {
        "ce": float(ce.data),
        "l1": l1_value,
        "cmmd": cmmd_value,
        "total": float(ce.data) + cfg.lambda_l1 * l1_value + cfg.lambda_align * cmmd_value,
    }
    return loss, components


def total_loss(task_losses, task_weights) -> Tensor:
    """Joint objective: sum of alpha_j * per-task batch losses."""
    task_losses = list(task_losses)
    if not task_losses:
        raise DataError("total_loss needs at least one task loss")
    weights = list(task_weights) if hasattr(task_weights, "__iter__") else [task_weights] * len(task_losses)
    if len(weights) != len(task_losses):
        raise DataError(f"{len(weights)} weights for {len(task_losses)} losses")
    out = scale(task_losses[0], weights[0])
    for loss, w in zip(task_losses[1:], weights[1:]):
        out = add(out, scale(loss, w))
    return out


def sgd_step(params, learning_rate: float, masks=()) -> None:
    """p <- p - lr * grad for each param, then clamp masks at zero."""
    for p in params:
        if p.grad is not None:
            p.data -= learning_rate * p.grad
    for m in masks:
        np.maximum(m.data, 0.0, out=m.data)


def _model_logits(net, x):
    if isinstance(net, TaskNetwork):
        return net.forward(x, want_alignment=False).logits
    return net.forward(x)


def evaluate(net, split: LabeledSet, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions on the split's labels."""
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    correct = 0
    for i in range(0, len(split), batch_size):
        logits = _model_logits(net, split.images[i : i + batch_size])
        correct += int((logits.data.argmax(axis=1) == split.labels[i : i + batch_size]).sum())
    return correct / len(split)


def _relative_span(history, window) -> float:
    recent = history[-window:]
    low, high = min(recent), max(recent)
    return (high - low) / max(abs(high), abs(low), 1e-12)


def converged(history, window: int, tol: float) -> bool:
    """Relative spread of the last ``window`` epoch losses below ``tol``."""
    return len(history) >= window and _relative_span(history, window) < tol


def pretrain_aux(aux_data: LabeledSet, arch: Architecture, cfg: PretrainConfig, seed: int) -> AuxModel:
    """Train the auxiliary classifier with plain SGD on mean cross-entropy.

    A zero-epoch budget returns the randomly initialized (still frozen-after-
    return) model; same seed and data give bit-identical parameters.
    """
    cfg.validate()
    if len(aux_data) == 0:
        raise DataError("auxiliary pretraining needs a non-empty corpus")
    model = AuxModel.initialize(arch, seed)
    params = list(model.params.values())
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss = 0.0
        order = batches(aux_data, cfg.batch_size, seed, epoch, _AUX_BATCH_STREAM_ID)
        for idx in order:
            for p in params:
                p.zero_grad()
            logits = model.forward(aux_data.images[idx])
            loss = scale(softmax_cross_entropy(logits, aux_data.labels[idx]), 1.0 / len(idx))
            backward(loss)
            sgd_step(params, cfg.learning_rate)
            epoch_loss += float(loss.data)
        history.append(epoch_loss / len(order))
        if converged(history, cfg.convergence_window, cfg.convergence_tol):
            break
    return model


def train_damtl(
    aux: AuxModel,
    tasks,
    cfg: TrainConfig,
    mask_trainable: bool = True,
    mask_init: str = "uniform",
) -> TrainResult:
    """Joint training of all task networks against the frozen auxiliary model.

    Each epoch runs lockstep rounds of one batch per task: masked conv
    forward, dual FC streams, per-task loss, backward seeded with the task
    weight alpha (exactly the joint objective's gradients), projected SGD
    step. Stops when the joint epoch loss stabilizes within the convergence
    window or the epoch budget runs out. The auxiliary parameters are never
    stepped; their digest is invariant across the run.
    """
    cfg.validate()
    tasks = list(tasks)
    if not tasks:
        raise DataError("train_damtl needs at least one task")
    for t in tasks:
        if len(t.train) == 0 or len(t.test) == 0:
            raise DataError(f"task {t.task_id} has an empty split")

    nets = [init_task(aux, t, cfg.seed, task_id=t.task_id, mask_init=mask_init) for t in tasks]

    def run_task_round(j: int, idx) -> dict:
        net = nets[j]
        t0 = time.perf_counter()
        for p in net.parameters().values():
            p.zero_grad()
        for p in net.aux_fc_weights + net.aux_fc_biases:
            p.zero_grad()
        x = tasks[j].train.images[idx]
        y = tasks[j].train.labels[idx]
        loss, comp = task_loss(net, (x, y), cfg)
        backward(loss, seed=cfg.task_weight)
        step_params = [
            p for name, p in net.parameters().items()
            if mask_trainable or not name.startswith("mask")
        ]
        sgd_step(step_params, cfg.learning_rate, masks=net.masks if mask_trainable else ())
        comp["seconds"] = time.perf_counter() - t0
        return comp

    metrics = []
    joint_history = []
    converged_epoch = None
    workers = worker_count(len(tasks))
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = [batches(t.train, cfg.batch_size, cfg.seed, epoch, t.task_id) for t in tasks]
            sums = [_TaskSums() for _ in tasks]
            for r in range(max(len(o) for o in order)):
                live = [j for j in range(len(tasks)) if r < len(order[j])]
                if pool is not None:
                    results = list(pool.map(lambda j: (j, run_task_round(j, order[j][r])), live))
                else:
                    results = [(j, run_task_round(j, order[j][r])) for j in live]
                for j, comp in results:
                    sums[j].ce += comp["ce"]
                    sums[j].l1 += comp["l1"]
                    sums[j].cmmd += comp["cmmd"]
                    sums[j].seconds += comp["seconds"]
                    sums[j].steps += 1

            joint = 0.0
            for j, t in enumerate(tasks):
                t0 = time.perf_counter()
                ce = sums[j].ce / sums[j].steps
                l1 = sums[j].l1 / sums[j].steps
                cm = sums[j].cmmd / sums[j].steps
                total = ce + cfg.lambda_l1 * l1 + cfg.lambda_align * cm
                train_acc = evaluate(nets[j], t.train)
                test_acc = evaluate(nets[j], t.test)
                seconds = sums[j].seconds + (time.perf_counter() - t0)
                metrics.append(
                    EpochMetrics(epoch, t.task_id, ce, l1, cm, total, train_acc, test_acc, seconds)
                )
                joint += cfg.task_weight * total
            joint_history.append(joint)
            if converged(joint_history, cfg.convergence_window, cfg.convergence_tol):
                converged_epoch = epoch
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    return TrainResult(nets, metrics, joint_history, converged_epoch)
