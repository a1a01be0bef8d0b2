"""Price panel ingestion, cleaning, normalization, splitting, and synthesis.

Panels are dense symbol-by-timestamp matrices. Preprocessing follows the
fit/transform idiom: filter and normalization statistics are learned once
(on the training portion of the column axis by default) and applied to the
whole panel, with an exact inverse for reporting in price units.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_ratios

SECONDS_PER_DAY = 86400.0
SECONDS_PER_MINUTE = 60.0


@dataclass
class TimeSeriesPanel:
    """N x T price matrix with timestamps (seconds), symbols, missing mask."""

    values: np.ndarray
    timestamps: np.ndarray
    symbols: list[str]
    missing_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        n, t = self.values.shape
        if n < 1 or t < 1:
            raise ValueError(f"panel must be at least 1x1, got {self.values.shape}")
        if self.timestamps.shape != (t,):
            raise ValueError("timestamps do not match the column count")
        if self.missing_mask.shape != (n, t):
            raise ValueError("missing mask does not match the value matrix")
        if len(self.symbols) != n:
            raise ValueError("symbol count does not match the row count")
        if len(set(self.symbols)) != n:
            raise ValueError("symbols must be distinct")
        if t > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def n_ticks(self) -> int:
        return self.values.shape[1]

    def column_slice(self, lo: int, hi: int) -> "TimeSeriesPanel":
        return TimeSeriesPanel(self.values[:, lo:hi].copy(), self.timestamps[lo:hi].copy(),
                               list(self.symbols), self.missing_mask[:, lo:hi].copy())


@dataclass(frozen=True)
class NormalizationState:
    per_row_mean: np.ndarray
    per_row_std: np.ndarray

    def __post_init__(self):
        if (np.asarray(self.per_row_std) <= 0).any():
            raise ValueError("normalization std must be positive for every row")

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.per_row_mean[:, None]) / self.per_row_std[:, None]

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.per_row_std[:, None] + self.per_row_mean[:, None]


# ---------------------------------------------------------------------------
# CSV ingestion

def ingest_csv(path) -> TimeSeriesPanel:
    """Read (timestamp, symbol, price) records into a dense panel.

    Timestamps are ISO-8601 or integer ticks, auto-detected from the first
    data row; the two styles cannot be mixed within one file.
    """
    records: dict[tuple[float, str], float] = {}
    symbols: list[str] = []
    seen_symbols: set[str] = set()
    ts_mode: str | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["timestamp", "symbol", "price"]:
            raise ValueError(f"{path}: expected header 'timestamp,symbol,price', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            raw_ts, symbol, raw_price = (f.strip() for f in row)
            if ts_mode is None:
                ts_mode = "tick" if _looks_like_int(raw_ts) else "iso"
            ts = _parse_timestamp(raw_ts, ts_mode, path, lineno)
            try:
                price = float(raw_price)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: unparsable price {raw_price!r}") from None
            if not math.isfinite(price):
                raise ValueError(f"{path}: line {lineno}: non-finite price {raw_price!r}")
            key = (ts, symbol)
            if key in records:
                raise ValueError(
                    f"{path}: line {lineno}: duplicate record for timestamp {raw_ts}, symbol {symbol}")
            records[key] = price
            if symbol not in seen_symbols:
                seen_symbols.add(symbol)
                symbols.append(symbol)
    if not records:
        raise ValueError(f"{path}: no data rows")
    timestamps = np.array(sorted({ts for ts, _ in records}))
    ts_index = {ts: i for i, ts in enumerate(timestamps)}
    sym_index = {s: i for i, s in enumerate(symbols)}
    values = np.full((len(symbols), len(timestamps)), np.nan)
    for (ts, symbol), price in records.items():
        values[sym_index[symbol], ts_index[ts]] = price
    return TimeSeriesPanel(values, timestamps, symbols, np.isnan(values))


def _looks_like_int(text: str) -> bool:
    try:
        int(text)
        return True
    except ValueError:
        return False


def _parse_timestamp(text: str, mode: str, path, lineno: int) -> float:
    if mode == "tick":
        try:
            return float(int(text))
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: expected integer tick, got {text!r}") from None
    try:
        return datetime.fromisoformat(text).timestamp()
    except ValueError:
        raise ValueError(f"{path}: line {lineno}: unparsable ISO timestamp {text!r}") from None


def write_panel_csv(panel: TimeSeriesPanel, path) -> None:
    """Write observed cells as (timestamp, symbol, price) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "symbol", "price"])
        for j, ts in enumerate(panel.timestamps):
            for i, symbol in enumerate(panel.symbols):
                if panel.missing_mask[i, j]:
                    continue
                ts_txt = str(int(ts)) if float(ts).is_integer() else repr(float(ts))
                writer.writerow([ts_txt, symbol, repr(float(panel.values[i, j]))])


# ---------------------------------------------------------------------------
# preprocessing

class PanelPreprocessor(BaseEstimator, TransformerMixin):
    """Filter, impute, and Z-score a panel.

    Rows are dropped when more than ``max_missing_frac`` of their cells are
    missing, when they have no records within the first or last
    ``edge_days`` of the panel, or when any contiguous missing run exceeds
    ``max_gap_minutes`` (run length times the median tick interval).
    Remaining gaps are filled with the row mean of observed values, then
    each row is normalized to zero mean and unit sample std. Statistics are
    fit on the training columns implied by ``split_ratios`` (pass None to
    use every column). Constant rows are dropped with a warning.
    """

    def __init__(self, max_missing_frac: float = 0.5, edge_days: float = 5.0,
                 max_gap_minutes: float = 15.0, split_ratios=(0.7, 0.2, 0.1)):
        self.max_missing_frac = max_missing_frac
        self.edge_days = edge_days
        self.max_gap_minutes = max_gap_minutes
        self.split_ratios = split_ratios

    def fit(self, panel: TimeSeriesPanel, y=None):
        ts = panel.timestamps
        tick = float(np.median(np.diff(ts))) if panel.n_ticks > 1 else 1.0
        first_edge = ts <= ts[0] + self.edge_days * SECONDS_PER_DAY
        last_edge = ts >= ts[-1] - self.edge_days * SECONDS_PER_DAY
        n_stats = self._stats_columns(panel.n_ticks)

        kept: list[int] = []
        dropped_constant: list[str] = []
        for i in range(panel.n_series):
            mask = panel.missing_mask[i]
            if mask.mean() > self.max_missing_frac:
                continue
            observed = ~mask
            if not observed[first_edge].any() or not observed[last_edge].any():
                continue
            if _longest_run(mask) * tick > self.max_gap_minutes * SECONDS_PER_MINUTE:
                continue
            kept.append(i)

        means: list[float] = []
        stds: list[float] = []
        final: list[int] = []
        for i in kept:
            row = panel.values[i].copy()
            mask = panel.missing_mask[i]
            row[mask] = row[~mask].mean()
            window = row[:n_stats]
            std = window.std(ddof=1) if window.size > 1 else 0.0
            if std < 1e-12:
                dropped_constant.append(panel.symbols[i])
                continue
            means.append(window.mean())
            stds.append(std)
            final.append(i)
        if dropped_constant:
            warnings.warn(f"dropping constant rows: {dropped_constant}")
        if not final:
            raise ValueError("empty panel after filtering")

        self.kept_symbols_ = [panel.symbols[i] for i in final]
        self.state_ = NormalizationState(np.array(means), np.array(stds))
        self.tick_interval_ = tick
        self.n_stats_columns_ = n_stats
        return self

    def transform(self, panel: TimeSeriesPanel) -> TimeSeriesPanel:
        if not hasattr(self, "state_"):
            raise RuntimeError("PanelPreprocessor is not fitted")
        index = {s: i for i, s in enumerate(panel.symbols)}
        missing = [s for s in self.kept_symbols_ if s not in index]
        if missing:
            raise ValueError(f"panel lacks fitted symbols: {missing}")
        rows = [index[s] for s in self.kept_symbols_]
        values = panel.values[rows].copy()
        mask = panel.missing_mask[rows]
        for r in range(values.shape[0]):
            if mask[r].any():
                values[r, mask[r]] = values[r, ~mask[r]].mean()
        values = self.state_.apply(values)
        return TimeSeriesPanel(values, panel.timestamps.copy(), list(self.kept_symbols_),
                               np.zeros_like(mask))

    def inverse_transform(self, panel_or_values):
        if isinstance(panel_or_values, TimeSeriesPanel):
            raw = self.state_.invert(panel_or_values.values)
            return TimeSeriesPanel(raw, panel_or_values.timestamps.copy(),
                                   list(panel_or_values.symbols),
                                   panel_or_values.missing_mask.copy())
        return self.state_.invert(np.asarray(panel_or_values))

    def _stats_columns(self, n_ticks: int) -> int:
        if self.split_ratios is None:
            return n_ticks
        counts = split_counts(n_ticks, check_ratios(self.split_ratios))
        return counts[0]


def preprocess(panel: TimeSeriesPanel, **rules) -> tuple[TimeSeriesPanel, NormalizationState]:
    """One-shot filter + impute + normalize; returns the fitted state."""
    prep = PanelPreprocessor(**rules)
    out = prep.fit(panel).transform(panel)
    return out, prep.state_


def _longest_run(mask: np.ndarray) -> int:
    longest = current = 0
    for flag in mask:
        current = current + 1 if flag else 0
        longest = max(longest, current)
    return longest


# ---------------------------------------------------------------------------
# chronological split

def split_counts(t: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor-rounded column counts; the remainder goes to the training split."""
    n_val = int(ratios[1] * t)
    n_test = int(ratios[2] * t)
    return t - n_val - n_test, n_val, n_test


def split_panel(panel: TimeSeriesPanel, ratios=(0.7, 0.2, 0.1)):
    """Contiguous chronological train/validation/test partition."""
    r = check_ratios(ratios)
    n_train, n_val, n_test = split_counts(panel.n_ticks, r)
    for name, count in (("training", n_train), ("validation", n_val), ("test", n_test)):
        if count < 1:
            raise ValueError(f"{name} split would be empty for T={panel.n_ticks}, ratios {r}")
    a, b = n_train, n_train + n_val
    return panel.column_slice(0, a), panel.column_slice(a, b), panel.column_slice(b, panel.n_ticks)


# ---------------------------------------------------------------------------
# synthetic panels with planted structure

@dataclass(frozen=True)
class SynthConfig:
    n_series: int = 8
    n_ticks: int = 4000
    n_blocks: int = 2
    within_block_corr: float = 0.6
    ar_coeff: float = 0.3
    season_amp: float = 1.0
    season_period_min: int = 40
    season_period_max: int = 90
    noise_scale: float = 0.02
    shifts_per_series: int = 3
    shift_magnitude: float = 0.05
    up_shift_prob: float = 0.5
    min_shift_separation: int = 150
    base_price_min: float = 50.0
    base_price_max: float = 150.0
    tick_seconds: float = 60.0

    def __post_init__(self):
        if self.n_series < 1 or self.n_ticks < 2:
            raise ValueError("need n_series >= 1 and n_ticks >= 2")
        if not 1 <= self.n_blocks <= self.n_series:
            raise ValueError("n_blocks must be in [1, n_series]")
        if not 0.0 <= self.within_block_corr < 1.0:
            raise ValueError("within_block_corr must be in [0, 1)")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ValueError("ar_coeff must be in [0, 1)")


@dataclass
class SynthTruth:
    correlation: np.ndarray
    change_points: list[list[int]]
    shift_directions: list[list[int]] = field(default_factory=list)


def block_correlation(n: int, n_blocks: int, rho: float) -> np.ndarray:
    corr = np.eye(n)
    sizes = [n // n_blocks + (1 if i < n % n_blocks else 0) for i in range(n_blocks)]
    start = 0
    for size in sizes:
        corr[start:start + size, start:start + size] = rho
        start += size
    np.fill_diagonal(corr, 1.0)
    return corr


def synthesize(config: SynthConfig, seed: int) -> tuple[TimeSeriesPanel, SynthTruth]:
    """Deterministic panel with planted correlation blocks and level shifts.

    Each series is base_price * (1 + noise_scale * (season + AR noise) +
    planted step function); the truth records the innovation correlation
    matrix and the first index of each planted regime.
    """
    rng = np.random.default_rng(seed)
    n, t = config.n_series, config.n_ticks
    corr = block_correlation(n, config.n_blocks, config.within_block_corr)
    chol = np.linalg.cholesky(corr)

    eps = rng.standard_normal((t, n)) @ chol.T
    phi = config.ar_coeff
    z = np.zeros((t, n))
    z[0] = eps[0]
    scale_in = math.sqrt(1.0 - phi * phi)
    for step in range(1, t):
        z[step] = phi * z[step - 1] + scale_in * eps[step]

    periods = rng.integers(config.season_period_min, config.season_period_max + 1, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ticks = np.arange(t)
    season = config.season_amp * np.sin(
        2.0 * np.pi * ticks[None, :] / periods[:, None] + phases[:, None])

    change_points: list[list[int]] = []
    directions: list[list[int]] = []
    steps = np.zeros((n, t))
    lo, hi = t // 10, t - t // 10
    for i in range(n):
        taus = _spaced_choice(rng, lo, hi, config.shifts_per_series, config.min_shift_separation)
        signs = [1 if rng.random() < config.up_shift_prob else -1 for _ in taus]
        for tau, sign in zip(taus, signs):
            steps[i, tau:] += sign * config.shift_magnitude
        change_points.append(taus)
        directions.append(signs)

    base = rng.uniform(config.base_price_min, config.base_price_max, size=n)
    latent = season + z.T
    values = base[:, None] * (1.0 + config.noise_scale * latent + steps)
    timestamps = config.tick_seconds * np.arange(t)
    symbols = [f"S{i:02d}" for i in range(n)]
    panel = TimeSeriesPanel(values, timestamps, symbols, np.zeros((n, t), dtype=bool))
    return panel, SynthTruth(corr, change_points, directions)


def _spaced_choice(rng: np.random.Generator, lo: int, hi: int, count: int, min_sep: int) -> list[int]:
    chosen: list[int] = []
    if count <= 0:
        return chosen
    for candidate in rng.permutation(np.arange(lo, hi)):
        if all(abs(int(candidate) - c) >= min_sep for c in chosen):
            chosen.append(int(candidate))
            if len(chosen) == count:
                break
    return sorted(chosen)


def write_truth_json(truth: SynthTruth, path) -> None:
    payload = {
        "correlation": [[float(v) for v in row] for row in np.asarray(truth.correlation)],
        "change_points": truth.change_points,
        "shift_directions": truth.shift_directions,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth_json(path) -> SynthTruth:
    with open(path) as fh:
        payload = json.load(fh)
    return SynthTruth(np.array(payload["correlation"]), payload["change_points"],
                      payload.get("shift_directions", []))
