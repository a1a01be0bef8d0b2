"""Ground-truth targets for the factor tasks.

Four heterogeneous tasks share each input window: change-point detection
(classification), gap and moving-average regression, and price forecasting.
Targets for forecasting and change points come strictly from data at or
after the window end; gap and moving average use trailing factor windows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class TaskId(enum.Enum):
    CPD = "cpd"
    GAP = "gap"
    MA = "ma"
    PF = "pf"

    @property
    def ordinal(self) -> int:
        return TASK_ORDER.index(self) + 1


TASK_ORDER = (TaskId.CPD, TaskId.GAP, TaskId.MA, TaskId.PF)
DEFAULT_GAP_WINDOW = 20
DEFAULT_MA_WINDOW = 40
DEFAULT_CPD_WINDOW = 60


def parse_tasks(spec: str) -> tuple[TaskId, ...]:
    """Parse a comma list like "cpd,gap,ma,pf" into ordered TaskIds."""
    wanted = {s.strip().lower() for s in spec.split(",") if s.strip()}
    unknown = wanted - {t.value for t in TaskId}
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}")
    return tuple(t for t in TASK_ORDER if t.value in wanted)


# ---------------------------------------------------------------------------
# gap and moving average

def gap_target(window: np.ndarray) -> np.ndarray:
    """Dispersion ratio (max - min) / length along the last axis."""
    window = np.asarray(window, dtype=np.float64)
    length = window.shape[-1]
    if length < 2:
        raise ValueError(f"gap window needs length >= 2, got {length}")
    return (window.max(axis=-1) - window.min(axis=-1)) / length


def uniform_kernel(half_width: int) -> np.ndarray:
    if half_width < 0:
        raise ValueError("half_width must be nonnegative")
    n = 2 * half_width + 1
    return np.full(n, 1.0 / n)


def moving_average(series: np.ndarray, kernel: np.ndarray, at: int | None = None) -> float:
    """Density-weighted average sum_i kernel[M+i] * series[at - i], i in [-M, M].

    The kernel must be a discrete density over an odd number of taps. No
    implicit padding: evaluation points without full history raise.
    """
    series = np.asarray(series, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size % 2 != 1:
        raise ValueError(f"kernel must have an odd number of taps, got shape {kernel.shape}")
    if (kernel < 0).any() or abs(kernel.sum() - 1.0) > 1e-12:
        raise ValueError("kernel must be a nonnegative density summing to 1")
    m = kernel.size // 2
    if at is None:
        at = series.size // 2
    if at - m < 0 or at + m >= series.size:
        raise ValueError(
            f"insufficient history: stencil of half-width {m} at index {at} "
            f"exceeds series of length {series.size}")
    window = series[at - m:at + m + 1]
    return float(np.dot(kernel, window[::-1]))


def trailing_mean(window: np.ndarray) -> np.ndarray:
    """Uniform moving average in trailing form (window ending at t), per node."""
    return np.asarray(window, dtype=np.float64).mean(axis=-1)


# ---------------------------------------------------------------------------
# change-point segmentation by dynamic programming

@dataclass(frozen=True)
class Segmentation:
    breakpoints: tuple[int, ...]
    segment_costs: tuple[float, ...]
    total_cost: float


@dataclass(frozen=True)
class CpdLabels:
    labels: np.ndarray
    threshold: float


def _segment_cost_table(series: np.ndarray) -> np.ndarray:
    """cost[a, b] = sum over x[a:b] of (x - mean)^2, clamped at 0."""
    s1 = np.concatenate([[0.0], np.cumsum(series)])
    s2 = np.concatenate([[0.0], np.cumsum(series * series)])
    a = np.arange(series.size + 1)
    lengths = a[None, :] - a[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = (s2[None, :] - s2[:, None]) - (s1[None, :] - s1[:, None]) ** 2 / lengths
    cost[lengths <= 0] = np.inf
    return np.maximum(cost, 0.0)


def segment_dp(series: np.ndarray, n_breakpoints: int, min_segment: int = 2) -> Segmentation:
    """Globally optimal K-breakpoint segmentation under the L2 cost.

    Ties in total cost resolve to the lexicographically earliest breakpoint
    tuple. Breakpoints are segment start indices in (0, T).
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    t = series.size
    k = int(n_breakpoints)
    if k < 0:
        raise ValueError("n_breakpoints must be >= 0")
    if t < (k + 1) * min_segment:
        raise ValueError(
            f"series of length {t} cannot hold {k} breakpoints with min segment {min_segment}")
    cost = _segment_cost_table(series)
    if k == 0:
        c = float(cost[0, t])
        return Segmentation((), (c,), c)
    if k == 1:
        # vectorized fast path; argmin's first-minimum rule matches the
        # lexicographic tie-break of the general DP
        bps = np.arange(min_segment, t - min_segment + 1)
        totals = cost[0, bps] + cost[bps, t]
        bp = int(bps[np.argmin(totals)])
        seg_costs = (float(cost[0, bp]), float(cost[bp, t]))
        return Segmentation((bp,), seg_costs, float(sum(seg_costs)))

    # best[e] for the current breakpoint count: (cost, breakpoint tuple) for x[0:e]
    best: list[tuple[float, tuple[int, ...]] | None] = [None] * (t + 1)
    for e in range(min_segment, t + 1):
        best[e] = (float(cost[0, e]), ())
    for _ in range(k):
        nxt: list[tuple[float, tuple[int, ...]] | None] = [None] * (t + 1)
        for e in range(t + 1):
            candidate = None
            for bp in range(min_segment, e - min_segment + 1):
                prev = best[bp]
                if prev is None:
                    continue
                entry = (prev[0] + float(cost[bp, e]), prev[1] + (bp,))
                if candidate is None or entry < candidate:
                    candidate = entry
            nxt[e] = candidate
        best = nxt

    final = best[t]
    assert final is not None
    total, bps = final
    bounds = (0,) + bps + (t,)
    seg_costs = tuple(float(cost[a, b]) for a, b in zip(bounds[:-1], bounds[1:]))
    return Segmentation(bps, seg_costs, float(sum(seg_costs)))


def label_change_points(series: np.ndarray, segmentation: Segmentation, eta: float) -> CpdLabels:
    """Trend label per breakpoint: 1 iff the new segment's max exceeds the
    change-point value by more than eta times that value.

    The change-point value is the last sample of the preceding segment
    (breakpoints here mark new-segment starts), so an upward level shift
    compares post-shift prices against the pre-shift level.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    series = np.asarray(series, dtype=np.float64).ravel()
    bounds = segmentation.breakpoints + (series.size,)
    labels = np.zeros(len(segmentation.breakpoints), dtype=np.int64)
    for i, tk in enumerate(segmentation.breakpoints):
        x0 = series[tk - 1]
        if x0 <= 0:
            raise ValueError(
                f"relative threshold undefined: series value {x0} at breakpoint {tk} is not positive")
        seg = series[tk:bounds[i + 1]]
        labels[i] = 1 if seg.max() - x0 > eta * x0 else 0
    return CpdLabels(labels, eta)


# ---------------------------------------------------------------------------
# window/target assembly

@dataclass(frozen=True)
class WindowGeometry:
    t_in: int = 32
    horizon: int = 2
    gap_window: int = DEFAULT_GAP_WINDOW
    ma_window: int = DEFAULT_MA_WINDOW
    cpd_window: int = DEFAULT_CPD_WINDOW
    stride: int = 10
    n_breakpoints: int = 1
    eta: float = 0.02

    def __post_init__(self):
        for name in ("t_in", "horizon", "gap_window", "ma_window", "cpd_window", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gap_window < 2:
            raise ValueError("gap_window must be >= 2")

    @property
    def history(self) -> int:
        return max(self.t_in, self.gap_window, self.ma_window)

    @property
    def lookahead(self) -> int:
        return max(self.horizon, self.cpd_window)


@dataclass
class TaskDataset:
    """Aligned input windows and per-task targets for one split."""
    anchors: np.ndarray                       # window-end indices t; input = [t - t_in, t)
    inputs: np.ndarray                        # (B, N, t_in), normalized units
    targets: dict = field(default_factory=dict)
    window_labels: np.ndarray | None = None   # (B,) majority change-point label per window

    def __len__(self) -> int:
        return len(self.anchors)


def build_task_targets(norm_values: np.ndarray, raw_values: np.ndarray,
                       geom: WindowGeometry, start: int, stop: int,
                       tasks: tuple[TaskId, ...] = TASK_ORDER) -> TaskDataset:
    """Build aligned windows and targets over columns [start, stop).

    Inputs and regression targets use normalized values; change-point labels
    use raw prices. Anchors never cross split boundaries; windows whose
    factor or forecast ranges would run past the split are skipped.
    """
    norm_values = np.asarray(norm_values, dtype=np.float64)
    raw_values = np.asarray(raw_values, dtype=np.float64)
    first = start + geom.history
    last = stop - geom.lookahead
    anchors = np.arange(first, last + 1, geom.stride, dtype=np.int64)
    if anchors.size == 0:
        return TaskDataset(anchors, np.zeros((0, norm_values.shape[0], geom.t_in)))

    inputs = np.stack([norm_values[:, t - geom.t_in:t] for t in anchors])
    data = TaskDataset(anchors, inputs)
    for task in tasks:
        if task is TaskId.PF:
            data.targets[task] = np.stack([norm_values[:, t:t + geom.horizon] for t in anchors])
        elif task is TaskId.GAP:
            data.targets[task] = np.stack(
                [gap_target(norm_values[:, t - geom.gap_window:t]) for t in anchors])
        elif task is TaskId.MA:
            data.targets[task] = np.stack(
                [trailing_mean(norm_values[:, t - geom.ma_window:t]) for t in anchors])
        elif task is TaskId.CPD:
            labels = np.zeros((anchors.size, norm_values.shape[0]), dtype=np.int64)
            for bi, t in enumerate(anchors):
                for node in range(raw_values.shape[0]):
                    segment = raw_values[node, t:t + geom.cpd_window]
                    seg = segment_dp(segment, geom.n_breakpoints)
                    labels[bi, node] = label_change_points(segment, seg, geom.eta).labels[0]
            data.targets[task] = labels
            data.window_labels = (labels.mean(axis=1) >= 0.5).astype(np.int64)
    return data
