"""Evaluation metrics and the top-K long/short backtest.

Backtest accounting rule: every opened position carries unit notional.
Gross pnl per position is direction * (exit/entry - 1); one round-trip cost
is charged per position. The cumulative return after each rebalance is
(sum of long gross) + (sum of short gross) - (positions so far) * cost,
so the final return equals long_pnl + short_pnl - total_costs exactly.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


# ---------------------------------------------------------------------------
# metrics

def regression_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(MAE, RMSE, MAPE-in-percent); zero-truth MAPE terms are skipped with a warning."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty series")
    diff = truth - pred
    mae = float(np.abs(diff).mean())
    rmse = float(np.sqrt((diff * diff).mean()))
    nonzero = truth != 0
    if not nonzero.all():
        warnings.warn(f"MAPE: skipping {int((~nonzero).sum())} zero-truth terms")
    if nonzero.any():
        mape = float((np.abs(diff[nonzero] / truth[nonzero])).mean() * 100.0)
    else:
        mape = 0.0
    return mae, rmse, mape


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    recall: float
    accuracy: float
    f1: float
    flags: tuple[str, ...] = ()


def classification_metrics(pred: np.ndarray, truth: np.ndarray) -> ClassificationMetrics:
    """Confusion-matrix metrics for binary labels; zero denominators give 0, flagged."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} labels must be 0 or 1")
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    flags = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, flags = 0.0, flags + ["no-positive-predictions"]
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, flags = 0.0, flags + ["no-positive-truth"]
    accuracy = float((pred == truth).mean())
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, flags = 0.0, flags + ["f1-zero-denominator"]
    return ClassificationMetrics(precision, recall, accuracy, f1, tuple(flags))


# ---------------------------------------------------------------------------
# backtest

@dataclass(frozen=True)
class StrategyConfig:
    k: int = 10
    horizon: int = 2
    open_threshold: float = 0.001
    cost: float = 0.001
    rebalance: int = 2

    def __post_init__(self):
        if self.k < 1 or self.horizon < 1 or self.rebalance < 1:
            raise ValueError("k, horizon, rebalance must be >= 1")
        if self.open_threshold < 0 or self.cost < 0:
            raise ValueError("thresholds and cost must be nonnegative")


@dataclass(frozen=True)
class Position:
    time: int
    node: int
    direction: int   # +1 long, -1 short
    entry: float
    exit: float
    gross: float     # direction * (exit/entry - 1)


@dataclass
class RebalanceRecord:
    time: int
    positions: list


@dataclass
class BacktestLedger:
    records: list = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cumulative_return: np.ndarray = field(default_factory=lambda: np.zeros(0))
    long_pnl: float = 0.0
    short_pnl: float = 0.0
    total_costs: float = 0.0
    final_return: float = 0.0
    cost_per_position: float = 0.0
    skipped: list = field(default_factory=list)

    @property
    def n_positions(self) -> int:
        return sum(len(r.positions) for r in self.records)


def backtest(forecasts: np.ndarray, forecast_times: np.ndarray, prices: np.ndarray,
             cfg: StrategyConfig) -> BacktestLedger:
    """Simulate the top-K long/short strategy on raw prices.

    ``forecasts[i, n]`` is the predicted price of node n at time
    ``forecast_times[i] + horizon``; positions open when the predicted
    relative move exceeds the threshold, close after the horizon, and every
    rebalance instant re-ranks nodes by move magnitude.
    """
    forecasts = np.asarray(forecasts, dtype=np.float64)
    forecast_times = np.asarray(forecast_times, dtype=np.int64)
    prices = np.asarray(prices, dtype=np.float64)
    if forecasts.shape != (forecast_times.size, prices.shape[0]):
        raise ValueError(
            f"forecasts {forecasts.shape} do not align with {forecast_times.size} times "
            f"and {prices.shape[0]} nodes")
    ledger = BacktestLedger()
    long_acc = short_acc = 0.0
    n_positions = 0
    times: list[int] = []
    cumulative: list[float] = []
    for i, t in enumerate(forecast_times):
        if i > 0 and (t - forecast_times[0]) % cfg.rebalance != 0:
            continue
        if t + cfg.horizon >= prices.shape[1]:
            ledger.skipped.append(int(t))
            continue
        entry = prices[:, t]
        moves = forecasts[i] / entry - 1.0
        candidates = np.flatnonzero(np.abs(moves) > cfg.open_threshold)
        record = RebalanceRecord(int(t), [])
        if candidates.size:
            ranked = candidates[np.argsort(-np.abs(moves[candidates]), kind="stable")]
            for node in ranked[:cfg.k]:
                direction = 1 if moves[node] > 0 else -1
                exit_price = prices[node, t + cfg.horizon]
                gross = direction * (exit_price / entry[node] - 1.0)
                record.positions.append(Position(int(t), int(node), direction,
                                                 float(entry[node]), float(exit_price),
                                                 float(gross)))
                if direction > 0:
                    long_acc += gross
                else:
                    short_acc += gross
                n_positions += 1
        ledger.records.append(record)
        times.append(int(t))
        cumulative.append(long_acc + short_acc - n_positions * cfg.cost)
    ledger.times = np.array(times, dtype=np.int64)
    ledger.cumulative_return = np.array(cumulative)
    ledger.long_pnl = long_acc
    ledger.short_pnl = short_acc
    ledger.total_costs = n_positions * cfg.cost
    ledger.final_return = long_acc + short_acc - n_positions * cfg.cost
    ledger.cost_per_position = cfg.cost
    return ledger


# ---------------------------------------------------------------------------
# report files

def write_metrics_csv(rows: list[tuple[str, str, float]], path) -> None:
    """Rows of (task, metric, value); values round-trip exactly through repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", "value"])
        for task, metric, value in rows:
            writer.writerow([task, metric, repr(float(value))])


def read_metrics_csv(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["task", "metric", "value"]:
            raise ValueError(f"unexpected metrics header {header}")
        return [(task, metric, float(value)) for task, metric, value in reader]


def write_ledger_csv(ledger: BacktestLedger, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "node", "direction", "entry", "exit", "gross", "cost"])
        for record in ledger.records:
            for p in record.positions:
                writer.writerow([p.time, p.node, p.direction, repr(p.entry),
                                 repr(p.exit), repr(p.gross),
                                 repr(float(ledger.cost_per_position))])


def read_ledger_csv(path) -> BacktestLedger:
    """Rebuild a ledger (and its accounting aggregates) from a ledger CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["time", "node", "direction", "entry", "exit", "gross", "cost"]:
            raise ValueError(f"unexpected ledger header {header}")
        rows = [(int(t), int(n), int(d), float(e), float(x), float(g), float(c))
                for t, n, d, e, x, g, c in reader]
    ledger = BacktestLedger()
    if not rows:
        return ledger
    cost = rows[0][6]
    ledger.cost_per_position = cost
    long_acc = short_acc = 0.0
    n_positions = 0
    times: list[int] = []
    cumulative: list[float] = []
    current: RebalanceRecord | None = None
    for t, node, direction, entry, exit_price, gross, _ in rows:
        if current is None or current.time != t:
            if current is not None:
                times.append(current.time)
                cumulative.append(long_acc + short_acc - n_positions * cost)
            current = RebalanceRecord(t, [])
            ledger.records.append(current)
        current.positions.append(Position(t, node, direction, entry, exit_price, gross))
        if direction > 0:
            long_acc += gross
        else:
            short_acc += gross
        n_positions += 1
    times.append(current.time)
    cumulative.append(long_acc + short_acc - n_positions * cost)
    ledger.times = np.array(times, dtype=np.int64)
    ledger.cumulative_return = np.array(cumulative)
    ledger.long_pnl = long_acc
    ledger.short_pnl = short_acc
    ledger.total_costs = n_positions * cost
    ledger.final_return = long_acc + short_acc - n_positions * cost
    return ledger


def svg_line_chart(xs: np.ndarray, ys: np.ndarray, width: int = 640, height: int = 360,
                   title: str = "cumulative return") -> str:
    """Minimal deterministic line chart: one polyline through the series."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    margin = 40.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<title>{title}</title>',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white" stroke="black"/>']
    if xs.size:
        x0, x1 = xs.min(), xs.max()
        y0, y1 = ys.min(), ys.max()
        xspan = (x1 - x0) or 1.0
        yspan = (y1 - y0) or 1.0
        px = margin + (xs - x0) / xspan * (width - 2 * margin)
        py = height - margin - (ys - y0) / yspan * (height - 2 * margin)
        points = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(px, py))
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
                     f'points="{points}"/>')
        parts.append(f'<text x="{margin}" y="{margin / 2:.1f}" font-size="12">'
                     f'{title}: first {ys[0]:.6f}, last {ys[-1]:.6f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_network(weights: np.ndarray, symbols: list[str], width: int = 480,
                threshold: float | None = None) -> str:
    """Circle-layout graph; edge width scales with symmetrized weight."""
    weights = np.asarray(weights, dtype=np.float64)
    n = len(symbols)
    if weights.shape != (n, n):
        raise ValueError(f"adjacency {weights.shape} does not match {n} symbols")
    sym = 0.5 * (weights + weights.T)
    off_diag = sym[~np.eye(n, dtype=bool)] if n > 1 else np.zeros(1)
    cutoff = float(np.median(off_diag)) if threshold is None else threshold
    radius = width / 2.0 - 60.0
    cx = cy = width / 2.0
    angles = 2.0 * np.pi * np.arange(n) / max(n, 1)
    px = cx + radius * np.cos(angles)
    py = cy + radius * np.sin(angles)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{width}">',
             '<title>learned cross-sectional graph</title>']
    top = sym.max() or 1.0
    for i in range(n):
        for j in range(i + 1, n):
            if sym[i, j] > cutoff:
                stroke = 0.5 + 2.5 * sym[i, j] / top
                parts.append(f'<line x1="{px[i]:.2f}" y1="{py[i]:.2f}" x2="{px[j]:.2f}" '
                             f'y2="{py[j]:.2f}" stroke="gray" stroke-width="{stroke:.3f}"/>')
    for i, name in enumerate(symbols):
        parts.append(f'<circle cx="{px[i]:.2f}" cy="{py[i]:.2f}" r="12" fill="steelblue"/>')
        parts.append(f'<text x="{px[i]:.2f}" y="{py[i] + 4:.2f}" font-size="10" '
                     f'text-anchor="middle" fill="white">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(metrics_rows: list[tuple[str, str, float]], ledger: BacktestLedger,
                adjacency: np.ndarray, symbols: list[str], out_dir) -> list[str]:
    """Write metrics CSV, ledger CSV, return chart SVG, network SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_rows, metrics_path)
    paths.append(str(metrics_path))
    ledger_path = out / "ledger.csv"
    write_ledger_csv(ledger, ledger_path)
    paths.append(str(ledger_path))
    returns_path = out / "returns.svg"
    returns_path.write_text(svg_line_chart(ledger.times, ledger.cumulative_return))
    paths.append(str(returns_path))
    network_path = out / "network.svg"
    network_path.write_text(svg_network(adjacency, symbols))
    paths.append(str(network_path))
    return paths
