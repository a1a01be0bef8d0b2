"""Sequential multi-task training with quadratic consolidation.

Per batch, the active tasks run in the fixed order change-point detection,
gap, moving average, forecasting. Each task minimizes its own loss plus a
penalty anchoring parameters to the stored optima of the tasks already
solved in the pass, weighted per scalar parameter by stored importance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluation import classification_metrics, regression_metrics
from .importance import (ImportanceMap, InfoNceConfig, ViewConfig, compute_importance,
                         loss_gradient_importance)
from .targets import TASK_ORDER, TaskDataset, TaskId


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.001
    lr_decay: float = 0.7
    decay_every: int = 5
    batch_size: int = 32
    lambda1: float = 1e-5
    lambda2: float = 1e-5
    tasks: tuple[TaskId, ...] = TASK_ORDER
    use_mi: bool = True
    inner_steps: int = 1
    seed: int = 0
    temperature: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5
    jitter_std: float = 0.05
    scale_low: float = 0.95
    scale_high: float = 1.05
    early_stop: bool = False
    patience: int = 10

    def __post_init__(self):
        if TaskId.PF not in self.tasks:
            raise ValueError("the active task subset must contain the forecasting task")
        if tuple(t for t in TASK_ORDER if t in self.tasks) != tuple(self.tasks):
            raise ValueError(f"tasks must follow the canonical order, got {self.tasks}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("consolidation penalties must be nonnegative")
        if self.epochs < 0 or self.inner_steps < 1 or self.batch_size < 1:
            raise ValueError("invalid loop configuration")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def nce(self) -> InfoNceConfig:
        return InfoNceConfig(self.temperature, self.alpha, self.beta)


@dataclass
class TaskRecord:
    params: dict
    omega: ImportanceMap


@dataclass
class ConsolidationState:
    lambda1: float = 1e-5
    lambda2: float = 1e-5
    records: dict = field(default_factory=dict)


def consolidation_penalty(store: ad.ParamStore, state: ConsolidationState,
                          tasks: tuple[TaskId, ...] | None = None) -> ad.Tensor:
    """lambda1 * sum_n sum_ij omega (theta - theta*_n)^2 plus the head analog.

    ``tasks`` restricts the sum to the given stored tasks (Algorithm order:
    tasks solved earlier in the current pass); None sums every record.
    """
    selected = [t for t in (tasks if tasks is not None else state.records) if t in state.records]
    total = ad.constant(0.0)
    if (state.lambda1 == 0.0 and state.lambda2 == 0.0) or not selected:
        return total
    for task in selected:
        record = state.records[task]
        for name, param in store.items():
            lam = state.lambda1 if name.startswith("theta/") else state.lambda2
            if lam == 0.0:
                continue
            stored = record.params[name]
            omega = record.omega.omega[name]
            if stored.shape != param.data.shape:
                raise ad.ShapeError(
                    f"stored optimum for {name} has shape {stored.shape}, "
                    f"parameter has {param.data.shape}")
            if not omega.any():
                continue
            drift = ad.sub(param, ad.constant(stored))
            term = ad.sum_all(ad.mul(ad.constant(omega), ad.mul(drift, drift)))
            total = ad.add(total, ad.scale(term, lam))
    return total


def train_task(model, task: TaskId, inputs: np.ndarray, target: np.ndarray,
               state: ConsolidationState, cfg: TrainConfig, lr: float,
               batch_index: int, prior_tasks: tuple[TaskId, ...] = (),
               window_labels: np.ndarray | None = None,
               view_seed=0) -> float:
    """One task's inner minimization on one batch; stores optimum and importance."""
    first_loss = None
    for _ in range(cfg.inner_steps):
        loss_single = model.task_loss(inputs, task, target)
        loss = ad.add(loss_single, consolidation_penalty(model.store, state, prior_tasks)) \
            if prior_tasks else loss_single
        if not np.isfinite(loss.data):
            raise RuntimeError(
                f"non-finite loss for task {task.value} (lr={lr}, batch={batch_index})")
        if first_loss is None:
            first_loss = float(loss_single.data)
        model.store.zero_grad()
        grads = ad.backward(loss, model.store)
        for name, param in model.store.items():
            param.data -= lr * grads[name]
        model.store.zero_grad()

    if cfg.use_mi:
        omega = compute_importance(
            model, inputs, task,
            ViewConfig(cfg.jitter_std, cfg.scale_low, cfg.scale_high, seed=view_seed),
            cfg.nce(), labels=window_labels)
    else:
        omega = loss_gradient_importance(model, inputs, task, target)
    state.records[task] = TaskRecord(model.store.snapshot(), omega)
    return first_loss


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, task, train_loss, val_metric)

    def add(self, epoch: int, task: TaskId, train_loss: float, val_metric: float) -> None:
        self.rows.append((epoch, task.value, train_loss, val_metric))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "task", "train_loss", "val_metric"])
            for epoch, task, train_loss, val_metric in self.rows:
                writer.writerow([epoch, task, repr(float(train_loss)), repr(float(val_metric))])


def predict_batched(model, inputs: np.ndarray, task: TaskId, batch_size: int) -> np.ndarray:
    parts = [model.predict(inputs[i:i + batch_size], task).data
             for i in range(0, len(inputs), batch_size)]
    return np.concatenate(parts, axis=0)


def validation_metric(model, data: TaskDataset, task: TaskId, batch_size: int) -> float:
    """Mean absolute error for regression tasks, F1 for change points."""
    if len(data) == 0:
        return float("nan")
    pred = predict_batched(model, data.inputs, task, batch_size)
    target = data.targets[task]
    if task is TaskId.CPD:
        labels = pred.argmax(axis=-1).reshape(-1)
        return classification_metrics(labels, target.reshape(-1)).f1
    if task in (TaskId.GAP, TaskId.MA):
        pred = pred.reshape(target.shape)
    return regression_metrics(pred.ravel(), target.ravel())[0]


def validation_loss(model, data: TaskDataset, task: TaskId, batch_size: int) -> float:
    if len(data) == 0:
        return float("nan")
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        loss = model.task_loss(data.inputs[sl], task, data.targets[task][sl])
        n = len(data.inputs[sl])
        total += float(loss.data) * n
        count += n
    return total / count


def train(model, train_data: TaskDataset, val_data: TaskDataset | None,
          cfg: TrainConfig) -> tuple[ConsolidationState, TrainLog]:
    """Run the epoch/batch/task loop; returns consolidation state and log."""
    if len(train_data) == 0:
        raise ValueError("no training windows")
    state = ConsolidationState(cfg.lambda1, cfg.lambda2)
    log = TrainLog()
    best_pf = float("inf")
    stall = 0
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(train_data))
        task_losses = {task: [] for task in cfg.tasks}
        for bi in range(0, len(order), cfg.batch_size):
            idx = order[bi:bi + cfg.batch_size]
            inputs = train_data.inputs[idx]
            labels = None
            if train_data.window_labels is not None:
                labels = train_data.window_labels[idx]
            for k, task in enumerate(cfg.tasks):
                prior = tuple(t for t in cfg.tasks[:k] if t in state.records)
                loss = train_task(
                    model, task, inputs, train_data.targets[task][idx], state, cfg, lr,
                    batch_index=bi // cfg.batch_size, prior_tasks=prior,
                    window_labels=labels,
                    view_seed=[cfg.seed, 13, epoch, bi, task.ordinal])
                task_losses[task].append(loss)
        for task in cfg.tasks:
            metric = (validation_metric(model, val_data, task, cfg.batch_size)
                      if val_data is not None else float("nan"))
            log.add(epoch, task, float(np.mean(task_losses[task])), metric)
        if cfg.early_stop and val_data is not None:
            pf_loss = validation_loss(model, val_data, TaskId.PF, cfg.batch_size)
            if pf_loss < best_pf - 1e-12:
                best_pf = pf_loss
                stall = 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
    return state, log
