"""Top-level estimator tying the pipeline together.

``FactorPredictor`` follows the scikit-learn estimator protocol: hyper
parameters are constructor arguments, ``fit`` consumes a preprocessed panel
plus its normalization state, and ``predict`` maps input windows to
forecasts in normalized units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .network import ArchConfig, SpatioTemporalModel
from .panel import NormalizationState, TimeSeriesPanel, split_counts
from .targets import TASK_ORDER, TaskId, WindowGeometry, build_task_targets, parse_tasks
from .trainer import ConsolidationState, TrainConfig, train
from .validation import as_window_batch, check_ratios


class FactorPredictor(BaseEstimator):
    """Continual multi-task graph predictor over a price panel."""

    def __init__(self, t_in=32, horizon=2, attention_dim=32, channels=64, feature_dim=64,
                 head_hidden=64, kernel_size=3, gap_window=20, ma_window=40, cpd_window=60,
                 stride=10, n_breakpoints=1, eta=0.02, split_ratios=(0.7, 0.2, 0.1),
                 epochs=100, lr=0.001, lr_decay=0.7, decay_every=5, batch_size=32,
                 lambda1=1e-5, lambda2=1e-5, tasks="cpd,gap,ma,pf", use_mi=True,
                 inner_steps=1, temperature=0.5, alpha=0.5, beta=0.5, jitter_std=0.05,
                 scale_low=0.95, scale_high=1.05, early_stop=False, patience=10, seed=0):
        self.t_in = t_in
        self.horizon = horizon
        self.attention_dim = attention_dim
        self.channels = channels
        self.feature_dim = feature_dim
        self.head_hidden = head_hidden
        self.kernel_size = kernel_size
        self.gap_window = gap_window
        self.ma_window = ma_window
        self.cpd_window = cpd_window
        self.stride = stride
        self.n_breakpoints = n_breakpoints
        self.eta = eta
        self.split_ratios = split_ratios
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tasks = tasks
        self.use_mi = use_mi
        self.inner_steps = inner_steps
        self.temperature = temperature
        self.alpha = alpha
        self.beta = beta
        self.jitter_std = jitter_std
        self.scale_low = scale_low
        self.scale_high = scale_high
        self.early_stop = early_stop
        self.patience = patience
        self.seed = seed

    # -- config assembly ---------------------------------------------------

    def active_tasks(self) -> tuple[TaskId, ...]:
        if isinstance(self.tasks, str):
            return parse_tasks(self.tasks)
        return tuple(t for t in TASK_ORDER if t in tuple(self.tasks))

    def arch_config(self) -> ArchConfig:
        return ArchConfig(t_in=self.t_in, horizon=self.horizon,
                          attention_dim=self.attention_dim, channels=self.channels,
                          feature_dim=self.feature_dim, head_hidden=self.head_hidden,
                          kernel_size=self.kernel_size)

    def geometry(self) -> WindowGeometry:
        return WindowGeometry(t_in=self.t_in, horizon=self.horizon,
                              gap_window=self.gap_window, ma_window=self.ma_window,
                              cpd_window=self.cpd_window, stride=self.stride,
                              n_breakpoints=self.n_breakpoints, eta=self.eta)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, lr_decay=self.lr_decay,
                           decay_every=self.decay_every, batch_size=self.batch_size,
                           lambda1=self.lambda1, lambda2=self.lambda2,
                           tasks=self.active_tasks(), use_mi=self.use_mi,
                           inner_steps=self.inner_steps, seed=self.seed,
                           temperature=self.temperature, alpha=self.alpha, beta=self.beta,
                           jitter_std=self.jitter_std, scale_low=self.scale_low,
                           scale_high=self.scale_high, early_stop=self.early_stop,
                           patience=self.patience)

    def build_model(self, n_nodes: int) -> SpatioTemporalModel:
        return SpatioTemporalModel(n_nodes, self.arch_config(), seed=self.seed)

    def build_datasets(self, panel: TimeSeriesPanel, norm_state: NormalizationState) -> dict:
        """Per-split windows and targets; windows never cross split bounds."""
        geom = self.geometry()
        raw = norm_state.invert(panel.values)
        n_train, n_val, _ = split_counts(panel.n_ticks, check_ratios(self.split_ratios))
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
                  "test": (n_train + n_val, panel.n_ticks)}
        return {name: build_task_targets(panel.values, raw, geom, lo, hi,
                                         tasks=self.active_tasks())
                for name, (lo, hi) in bounds.items()}

    # -- estimator protocol -------------------------------------------------

    def fit(self, panel: TimeSeriesPanel, norm_state: NormalizationState):
        if panel.missing_mask.any():
            raise ValueError("fit expects a preprocessed panel without missing cells")
        datasets = self.build_datasets(panel, norm_state)
        if len(datasets["train"]) == 0:
            raise ValueError("no training windows: panel too short for the window geometry")
        model = self.build_model(panel.n_series)
        state, log = train(model, datasets["train"], datasets["val"], self.train_config())
        self.model_ = model
        self.state_ = state
        self.log_ = log
        self.datasets_ = datasets
        self.norm_state_ = norm_state
        self.symbols_ = list(panel.symbols)
        return self

    def restore(self, panel: TimeSeriesPanel, norm_state: NormalizationState, checkpoint_path):
        """Rebuild a fitted-like predictor from a parameter checkpoint."""
        model = self.build_model(panel.n_series)
        load_checkpoint(checkpoint_path, model)
        self.model_ = model
        self.state_ = ConsolidationState(self.lambda1, self.lambda2)
        self.log_ = None
        self.datasets_ = self.build_datasets(panel, norm_state)
        self.norm_state_ = norm_state
        self.symbols_ = list(panel.symbols)
        return self

    def predict(self, windows) -> np.ndarray:
        """Forecast the next ``horizon`` normalized prices: (B, N, horizon)."""
        self._check_fitted()
        xb = as_window_batch(windows, self.t_in)
        return self.model_.predict(xb, TaskId.PF).data.copy()

    def predict_task(self, windows, task: TaskId) -> np.ndarray:
        self._check_fitted()
        xb = as_window_batch(windows, self.t_in)
        return self.model_.predict(xb, task).data.copy()

    def forecast_prices(self, windows) -> np.ndarray:
        """De-normalized forecasts in price units."""
        normalized = self.predict(windows)
        state = self.norm_state_
        return normalized * state.per_row_std[None, :, None] + state.per_row_mean[None, :, None]

    def adjacency(self, windows) -> np.ndarray:
        self._check_fitted()
        xb = as_window_batch(windows, self.t_in)
        return self.model_.adjacency(xb).data.copy()

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("FactorPredictor is not fitted")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: SpatioTemporalModel, state: ConsolidationState | None = None) -> None:
    importance = None
    if state is not None:
        importance = {task.value: record.omega.omega for task, record in state.records.items()}
    ad.save_snapshot(path, model.store.snapshot(), importance)


def load_checkpoint(path, model: SpatioTemporalModel) -> dict:
    """Load parameters into the model; returns per-task importance maps."""
    params, importance = ad.load_snapshot(path)
    model.store.load(params)
    return importance
