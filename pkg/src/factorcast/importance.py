"""Contrastive mutual-information proxies and per-parameter importance.

Importance of a parameter is the absolute gradient of an InfoNCE bound:
for feature-extractor parameters, the bound between the input and the
feature map plus the bound between the task output and the input; for head
parameters, the output bound alone. The classification task uses the
label-aware form; regression tasks use the plain batch form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .targets import TaskId


@dataclass(frozen=True)
class ViewConfig:
    """Stochastic but seed-deterministic transform X' = scale * X + jitter."""
    jitter_std: float = 0.05
    scale_low: float = 0.95
    scale_high: float = 1.05
    seed: object = 0

    def __post_init__(self):
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be nonnegative")
        if self.scale_low > self.scale_high:
            raise ValueError("scale range is empty")


@dataclass(frozen=True)
class InfoNceConfig:
    temperature: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")


def make_view(batch: np.ndarray, cfg: ViewConfig) -> np.ndarray:
    """Per-sample scale plus elementwise Gaussian jitter, same shape as input."""
    batch = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    shape = (batch.shape[0],) + (1,) * (batch.ndim - 1)
    scales = rng.uniform(cfg.scale_low, cfg.scale_high, size=shape)
    out = scales * batch
    if cfg.jitter_std > 0:
        out = out + rng.normal(0.0, cfg.jitter_std, size=batch.shape)
    return out


def infonce(u: ad.Tensor, v: ad.Tensor, temperature: float) -> ad.Tensor:
    """Batch-mean log ratio of positive-pair similarity over all pairs.

    Similarity is exp(u_i . v_j / r); everything runs through logsumexp so
    only log-similarities are ever materialized.
    """
    if u.ndim != 2 or u.shape != v.shape:
        raise ad.ShapeError(f"infonce: feature batches must match, got {u.shape} vs {v.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    inv_r = 1.0 / temperature
    logits = ad.scale(ad.matmul(u, ad.transpose(v)), inv_r)
    if not np.isfinite(logits.data).all():
        raise ValueError("infonce: non-finite similarity")
    positives = ad.scale(ad.sum_axis(ad.mul(u, v), axis=-1), inv_r)
    return ad.mean_all(ad.sub(positives, ad.logsumexp(logits, axis=-1)))


def supervised_infonce(u: ad.Tensor, v: ad.Tensor, labels: np.ndarray,
                       cfg: InfoNceConfig) -> ad.Tensor:
    """Label-aware InfoNCE: alpha * batch form + beta * positive-set term.

    The positive set of anchor i is every sample sharing its label,
    including i itself. Each positive p contributes the triple-product
    numerator s(X_i, X_p) s(X_i, X'_p) s(X'_i, X_p) against the cubed sum of
    all three similarity families.
    """
    total = ad.scale(infonce(u, v, cfg.temperature), cfg.alpha)
    if cfg.beta == 0:
        return total
    labels = np.asarray(labels).reshape(-1)
    b = u.shape[0]
    if labels.shape != (b,):
        raise ad.ShapeError(f"labels {labels.shape} do not match batch size {b}")
    pos_mask = labels[None, :] == labels[:, None]
    counts = pos_mask.sum(axis=1)
    if not counts.any():
        warnings.warn("supervised InfoNCE: no anchor has a positive sample; "
                      "falling back to the unsupervised term")
        return total
    inv_r = 1.0 / cfg.temperature
    luu = ad.scale(ad.matmul(u, ad.transpose(u)), inv_r)
    luv = ad.scale(ad.matmul(u, ad.transpose(v)), inv_r)
    lvu = ad.scale(ad.matmul(v, ad.transpose(u)), inv_r)
    log_numer = ad.add(ad.add(luu, luv), lvu)
    lse3 = ad.logsumexp(ad.concat([luu, luv, lvu], axis=-1), axis=-1)
    per_pair = ad.sub(log_numer, ad.reshape(ad.scale(lse3, 3.0), (b, 1)))
    weights = np.where(counts[:, None] > 0, pos_mask / (3.0 * b * np.maximum(counts, 1)[:, None]), 0.0)
    sup = ad.sum_all(ad.mul(per_pair, ad.constant(weights)))
    return ad.add(total, ad.scale(sup, cfg.beta))


@dataclass
class ImportanceMap:
    """Per-scalar-parameter nonnegative strengths, keyed like the ParamStore."""
    task: TaskId
    omega: dict = field(default_factory=dict)

    def theta(self) -> dict:
        return {n: v for n, v in self.omega.items() if n.startswith("theta/")}

    def w(self) -> dict:
        return {n: v for n, v in self.omega.items() if n.startswith("w/")}


def compute_importance(model, windows: np.ndarray, task: TaskId,
                       view_cfg: ViewConfig, nce_cfg: InfoNceConfig,
                       labels: np.ndarray | None = None) -> ImportanceMap:
    """Absolute InfoNCE-proxy gradients at the current parameters.

    One backward pass serves both partitions: the feature bound never
    touches head parameters, so head entries automatically see only the
    output bound's gradient.
    """
    view = make_view(windows, view_cfg)
    feats_x, outs_x = model.contrastive_matrices(windows, task)
    feats_v, outs_v = model.contrastive_matrices(view, task)
    mi_features = infonce(feats_x, feats_v, nce_cfg.temperature)
    if task is TaskId.CPD:
        if labels is None:
            raise ValueError("change-point importance needs window labels")
        mi_outputs = supervised_infonce(outs_x, outs_v, labels, nce_cfg)
    else:
        mi_outputs = infonce(outs_x, outs_v, nce_cfg.temperature)
    model.store.zero_grad()
    grads = ad.backward(ad.add(mi_features, mi_outputs), model.store)
    model.store.zero_grad()
    return ImportanceMap(task, {name: np.abs(g) for name, g in grads.items()})


def loss_gradient_importance(model, windows: np.ndarray, task: TaskId,
                             target: np.ndarray) -> ImportanceMap:
    """Baseline strengths: absolute gradients of the single-task loss."""
    loss = model.task_loss(windows, task, target)
    model.store.zero_grad()
    grads = ad.backward(loss, model.store)
    model.store.zero_grad()
    return ImportanceMap(task, {name: np.abs(g) for name, g in grads.items()})
