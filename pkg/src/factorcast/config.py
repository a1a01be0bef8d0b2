"""Run configuration: plain-text key=value files plus flag overrides.

Documented keys (matching the field names below): epochs, lr, decay,
decay_every, lambda1, lambda2, tasks, use_mi, seed, windows, horizon,
batch_size, stride, breakpoints, eta, attention_dim, channels, feature_dim,
head_hidden, kernel, inner_steps, temperature, alpha, beta, jitter,
scale_delta, split, early_stop, patience, n, t, noise, shifts,
shift_magnitude, blocks, corr, tick_seconds, k, cost, open_threshold,
rebalance. Lines are ``key = value``; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class UsageError(ValueError):
    """Bad configuration or arguments; maps to exit code 2."""


@dataclass
class RunConfig:
    # synthetic data generation
    n: int = 8
    t: int = 4000
    noise: float = 0.02
    shifts: int = 3
    shift_magnitude: float = 0.05
    blocks: int = 2
    corr: float = 0.6
    tick_seconds: float = 60.0
    # window geometry
    windows: tuple = (32, 20, 40, 60)  # input, gap, moving-average, change-point
    horizon: int = 2
    stride: int = 10
    breakpoints: int = 1
    eta: float = 0.02
    # architecture
    attention_dim: int = 32
    channels: int = 64
    feature_dim: int = 64
    head_hidden: int = 64
    kernel: int = 3
    # training
    epochs: int = 100
    lr: float = 0.001
    decay: float = 0.7
    decay_every: int = 5
    batch_size: int = 32
    lambda1: float = 1e-5
    lambda2: float = 1e-5
    tasks: str = "cpd,gap,ma,pf"
    use_mi: bool = True
    inner_steps: int = 1
    temperature: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5
    jitter: float = 0.05
    scale_delta: float = 0.05
    split: tuple = (0.7, 0.2, 0.1)
    early_stop: bool = False
    patience: int = 10
    seed: int = 0
    # backtest strategy
    k: int = 10
    cost: float = 0.001
    open_threshold: float = 0.001
    rebalance: int = 2

    def predictor_kwargs(self) -> dict:
        t_in, gap_w, ma_w, cpd_w = self.windows
        return dict(t_in=t_in, gap_window=gap_w, ma_window=ma_w, cpd_window=cpd_w,
                    horizon=self.horizon, stride=self.stride, n_breakpoints=self.breakpoints,
                    eta=self.eta, attention_dim=self.attention_dim, channels=self.channels,
                    feature_dim=self.feature_dim, head_hidden=self.head_hidden,
                    kernel_size=self.kernel, epochs=self.epochs, lr=self.lr,
                    lr_decay=self.decay, decay_every=self.decay_every,
                    batch_size=self.batch_size, lambda1=self.lambda1, lambda2=self.lambda2,
                    tasks=self.tasks, use_mi=self.use_mi, inner_steps=self.inner_steps,
                    temperature=self.temperature, alpha=self.alpha, beta=self.beta,
                    jitter_std=self.jitter, scale_low=1.0 - self.scale_delta,
                    scale_high=1.0 + self.scale_delta, split_ratios=self.split,
                    early_stop=self.early_stop, patience=self.patience, seed=self.seed)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["windows"] = list(self.windows)
        out["split"] = list(self.split)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    field = _FIELDS[name]
    text = str(raw).strip()
    if field.type in ("int",):
        return int(text)
    if field.type in ("float",):
        return float(text)
    if field.type in ("bool",):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"config key {name!r}: expected a boolean, got {raw!r}")
    if field.type in ("tuple",):
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if name == "windows":
            if len(parts) != 4:
                raise UsageError("windows must be four integers: input,gap,ma,cpd")
            return tuple(int(p) for p in parts)
        if len(parts) != 3:
            raise UsageError("split must be three ratios summing to 1")
        return tuple(float(p) for p in parts)
    return text  # str fields


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{source}: line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, UsageError):
                raise
            raise UsageError(f"{source}: line {lineno}: bad value for {key!r}: {raw!r}") from None
    return values


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), source=str(path)))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in _FIELDS:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
