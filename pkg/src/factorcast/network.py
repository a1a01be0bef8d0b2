"""Spatio-temporal feature extractor and per-task heads.

Two residual blocks, each a spectral graph convolution (graph Fourier
transform, per-eigenmode gains, inverse transform) followed by a spectral
temporal unit (real DFT, 1-D convolution, GLU, inverse DFT). Block outputs
are concatenated and projected to the shared feature map consumed by the
task heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attention
from . import autodiff as ad
from .targets import TaskId
from .validation import as_window_batch


@dataclass(frozen=True)
class ArchConfig:
    t_in: int = 32
    horizon: int = 2
    attention_dim: int = attention.DEFAULT_ATTENTION_DIM
    channels: int = 64
    feature_dim: int = 64
    head_hidden: int = 64
    kernel_size: int = 3
    n_blocks: int = 2  # fixed by the architecture; validated, not variable

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.n_blocks != 2:
            raise ValueError("exactly two spatio-temporal blocks are supported")

    def head_arity(self, task: TaskId) -> int:
        return {TaskId.CPD: 2, TaskId.GAP: 1, TaskId.MA: 1, TaskId.PF: self.horizon}[task]


def init_network(store: ad.ParamStore, n_nodes: int, cfg: ArchConfig,
                 rng: np.random.Generator) -> None:
    attention.init_attention(store, cfg.t_in, cfg.attention_dim, rng)
    k = cfg.kernel_size
    c = cfg.channels
    for b in (1, 2):
        store.add(f"theta/block{b}/gain", np.ones((1, n_nodes)))
        store.add(f"theta/block{b}/conv_in/w",
                  rng.normal(0.0, 1.0 / math.sqrt(2 * k), size=(2 * c, 2, k)))
        store.add(f"theta/block{b}/conv_in/b", np.zeros(2 * c))
        store.add(f"theta/block{b}/conv_out/w",
                  rng.normal(0.0, 1.0 / math.sqrt(c * k), size=(2, c, k)))
        store.add(f"theta/block{b}/conv_out/b", np.zeros(2))
    store.add("theta/fc/w", rng.normal(0.0, 1.0 / math.sqrt(2 * cfg.t_in),
                                       size=(2 * cfg.t_in, cfg.feature_dim)))
    store.add("theta/fc/b", np.zeros(cfg.feature_dim))
    for task in TaskId:
        arity = cfg.head_arity(task)
        store.add(f"w/{task.value}/h1/w",
                  rng.normal(0.0, 1.0 / math.sqrt(cfg.feature_dim),
                             size=(cfg.feature_dim, cfg.head_hidden)))
        store.add(f"w/{task.value}/h1/b", np.zeros(cfg.head_hidden))
        store.add(f"w/{task.value}/h2/w",
                  rng.normal(0.0, 1.0 / math.sqrt(cfg.head_hidden),
                             size=(cfg.head_hidden, arity)))
        store.add(f"w/{task.value}/h2/b", np.zeros(arity))


def spectral_graph_conv(x: ad.Tensor, eigvecs: ad.Tensor, gain: ad.Tensor) -> ad.Tensor:
    """GFT -> per-eigenmode gain -> IGFT for signals (..., N, T)."""
    n = x.shape[-2]
    spec = ad.matmul(ad.transpose(eigvecs), x)
    filtered = ad.mul(spec, ad.reshape(gain, (n, 1)))
    return ad.matmul(eigvecs, filtered)


def temporal_unit(x: ad.Tensor, w_in: ad.Tensor, b_in: ad.Tensor,
                  w_out: ad.Tensor, b_out: ad.Tensor) -> ad.Tensor:
    """Real DFT -> banked 1-D convolution -> GLU -> projection -> real IDFT.

    Real and imaginary parts travel as separate (last-axis) channels; the
    inverse transform reconstructs the real signal exactly, so no imaginary
    residue survives by construction.
    """
    t = x.shape[-1]
    re, im = ad.real_dft(x)
    h = ad.stack([re, im], axis=-1)        # (..., N, F, 2)
    h = ad.conv1d(h, w_in, b_in)           # (..., N, F, 2C)
    h = ad.glu(h, axis=-1)                 # (..., N, F, C)
    h = ad.conv1d(h, w_out, b_out)         # (..., N, F, 2)
    return ad.real_idft(h[..., 0], h[..., 1], t)


def st_block(x: ad.Tensor, eigvecs: ad.Tensor, store: ad.ParamStore, block: int,
             residual: bool = True) -> ad.Tensor:
    spat = spectral_graph_conv(x, eigvecs, store[f"theta/block{block}/gain"])
    temp = temporal_unit(spat,
                         store[f"theta/block{block}/conv_in/w"],
                         store[f"theta/block{block}/conv_in/b"],
                         store[f"theta/block{block}/conv_out/w"],
                         store[f"theta/block{block}/conv_out/b"])
    return ad.add(temp, x) if residual else temp


def extract_features(window: ad.Tensor, eigvecs: ad.Tensor, store: ad.ParamStore,
                     residual: bool = True) -> ad.Tensor:
    """Two residual blocks; concatenated outputs pass through the shared FC."""
    b1 = st_block(window, eigvecs, store, 1, residual)
    b2 = st_block(b1, eigvecs, store, 2, residual)
    cat = ad.concat([b1, b2], axis=-1)
    return ad.add(ad.matmul(cat, store["theta/fc/w"]), store["theta/fc/b"])


def apply_head(z: ad.Tensor, task: TaskId, store: ad.ParamStore) -> ad.Tensor:
    if not isinstance(task, TaskId):
        raise ValueError(f"unknown task {task!r}")
    prefix = f"w/{task.value}"
    h = ad.tanh(ad.add(ad.matmul(z, store[f"{prefix}/h1/w"]), store[f"{prefix}/h1/b"]))
    return ad.add(ad.matmul(h, store[f"{prefix}/h2/w"]), store[f"{prefix}/h2/b"])


class SpatioTemporalModel:
    """Full network over a shared parameter store.

    Every call rebuilds the graph from the current parameters, so one model
    instance serves both training steps and plain forward evaluation.
    """

    def __init__(self, n_nodes: int, cfg: ArchConfig, seed: int = 0):
        self.n_nodes = n_nodes
        self.cfg = cfg
        self.store = ad.ParamStore()
        init_network(self.store, n_nodes, cfg, np.random.default_rng(seed))

    def adjacency(self, windows: np.ndarray) -> ad.Tensor:
        xb = as_window_batch(windows, self.cfg.t_in)
        return attention.build_adjacency(ad.constant(xb),
                                         self.store["theta/attn/q"],
                                         self.store["theta/attn/k"])

    def _graph_basis(self, xb: np.ndarray) -> ad.Tensor:
        adj = attention.build_adjacency(ad.constant(xb),
                                        self.store["theta/attn/q"],
                                        self.store["theta/attn/k"])
        lap = attention.normalized_laplacian(attention.symmetrize(adj))
        _, u = ad.sym_eig(lap)
        return u

    def features(self, windows: np.ndarray) -> ad.Tensor:
        xb = as_window_batch(windows, self.cfg.t_in)
        u = self._graph_basis(xb)
        return extract_features(ad.constant(xb), u, self.store)

    def feature_matrix(self, windows: np.ndarray) -> ad.Tensor:
        z = self.features(windows)
        return ad.reshape(z, (z.shape[0], z.shape[1] * z.shape[2]))

    def head(self, z: ad.Tensor, task: TaskId) -> ad.Tensor:
        return apply_head(z, task, self.store)

    def predict(self, windows: np.ndarray, task: TaskId) -> ad.Tensor:
        return self.head(self.features(windows), task)

    def contrastive_matrices(self, windows: np.ndarray, task: TaskId):
        """Flattened feature and task-output batches sharing one graph."""
        z = self.features(windows)
        out = self.head(z, task)
        b = z.shape[0]
        feats = ad.reshape(z, (b, z.shape[1] * z.shape[2]))
        outs = ad.reshape(out, (b, out.shape[1] * out.shape[2]))
        return feats, outs

    def task_loss(self, windows: np.ndarray, task: TaskId, target: np.ndarray) -> ad.Tensor:
        """Single-task loss: cross-entropy for CPD, mean squared error otherwise."""
        pred = self.predict(windows, task)
        return prediction_loss(pred, task, target)


def prediction_loss(pred: ad.Tensor, task: TaskId, target: np.ndarray) -> ad.Tensor:
    target = np.asarray(target)
    if task is TaskId.CPD:
        logits = ad.reshape(pred, (pred.shape[0] * pred.shape[1], 2))
        return ad.cross_entropy(logits, target.reshape(-1).astype(np.int64))
    if task in (TaskId.GAP, TaskId.MA):
        flat = ad.reshape(pred, (pred.shape[0], pred.shape[1]))
        return ad.mse(flat, ad.constant(target))
    if task is TaskId.PF:
        return ad.mse(pred, ad.constant(target))
    raise ValueError(f"unknown task {task!r}")
