"""Command-line pipeline: generate, train, eval, backtest, segment, report.

Every command resolves its settings from defaults, an optional key=value
config file, and flag overrides; writes its artifacts under ``--out``; and
records a manifest with input fingerprints so identical manifests imply
byte-identical outputs. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import attention, evaluation
from .config import RunConfig, UsageError, load_run_config
from .estimator import FactorPredictor, save_checkpoint
from .evaluation import StrategyConfig, backtest, classification_metrics, regression_metrics
from .panel import (PanelPreprocessor, SynthConfig, ingest_csv, synthesize, write_panel_csv,
                    write_truth_json)
from .targets import TaskId, label_change_points, segment_dp


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, config_path,
                    inputs: list, outputs: list) -> Path:
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": cfg.seed,
        "parameters": cfg.as_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "out_dir": str(out_dir),
        "outputs": sorted(Path(p).name for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _resolve(args, **extra_overrides) -> RunConfig:
    overrides: dict = {}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key, value in extra_overrides.items():
        if value is not None:
            overrides[key] = value
    return load_run_config(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(cfg: RunConfig, panel_path):
    panel = ingest_csv(panel_path)
    prep = PanelPreprocessor(split_ratios=cfg.split)
    normalized = prep.fit(panel).transform(panel)
    return panel, normalized, prep


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = _resolve(args, seed=args.seed, n=args.n, t=args.t, noise=args.noise,
                   shifts=args.shifts)
    out = _out_dir(args)
    synth = SynthConfig(n_series=cfg.n, n_ticks=cfg.t, n_blocks=cfg.blocks,
                        within_block_corr=cfg.corr, noise_scale=cfg.noise,
                        shifts_per_series=cfg.shifts, shift_magnitude=cfg.shift_magnitude,
                        tick_seconds=cfg.tick_seconds)
    panel, truth = synthesize(synth, cfg.seed)
    panel_path = out / "panel.csv"
    truth_path = out / "truth.json"
    write_panel_csv(panel, panel_path)
    write_truth_json(truth, truth_path)
    inputs = [args.config] if args.config else []
    _write_manifest(out, "generate", cfg, args.config, inputs,
                    [panel_path, truth_path])
    print(f"wrote {panel_path} ({panel.n_series} series x {panel.n_ticks} ticks)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, seed=args.seed, tasks=args.tasks, epochs=args.epochs,
                   use_mi=(False if args.no_mi else None), lr=args.lr)
    out = _out_dir(args)
    _, normalized, prep = _load_inputs(cfg, args.panel)
    predictor = FactorPredictor(**cfg.predictor_kwargs())
    predictor.fit(normalized, prep.state_)
    checkpoint = out / "checkpoint.bin"
    save_checkpoint(checkpoint, predictor.model_, predictor.state_)
    log_path = out / "training_log.csv"
    predictor.log_.to_csv(log_path)
    inputs = ([args.config] if args.config else []) + [args.panel]
    _write_manifest(out, "train", cfg, args.config, inputs, [checkpoint, log_path])
    last_rows = predictor.log_.rows[-len(predictor.active_tasks()):] if predictor.log_.rows else []
    for _, task, train_loss, val_metric in last_rows:
        print(f"final {task}: train_loss={train_loss:.6f} val_metric={val_metric:.6f}")
    return 0


def _test_metrics(predictor: FactorPredictor) -> list:
    """Per-task metrics on the test split, in normalized and price units."""
    test = predictor.datasets_["test"]
    if len(test) == 0:
        raise UsageError("test split holds no complete windows; enlarge t or shrink windows")
    state = predictor.norm_state_
    rows = []
    for task in predictor.active_tasks():
        pred = np.concatenate(
            [predictor.predict_task(test.inputs[i:i + predictor.batch_size], task)
             for i in range(0, len(test), predictor.batch_size)], axis=0)
        target = test.targets[task]
        if task is TaskId.CPD:
            labels = pred.argmax(axis=-1).reshape(-1)
            m = classification_metrics(labels, target.reshape(-1))
            rows += [("cpd", "precision", m.precision), ("cpd", "recall", m.recall),
                     ("cpd", "accuracy", m.accuracy), ("cpd", "f1", m.f1)]
            continue
        pred = pred.reshape(target.shape)
        mae, rmse, mape = regression_metrics(pred.ravel(), target.ravel())
        rows += [(task.value, "mae", mae), (task.value, "rmse", rmse),
                 (task.value, "mape_pct", mape)]
        if task is TaskId.PF:
            pred_price = pred * state.per_row_std[None, :, None] + state.per_row_mean[None, :, None]
            true_price = target * state.per_row_std[None, :, None] + state.per_row_mean[None, :, None]
            mae, rmse, mape = regression_metrics(pred_price.ravel(), true_price.ravel())
            rows += [("pf_price", "mae", mae), ("pf_price", "rmse", rmse),
                     ("pf_price", "mape_pct", mape)]
    return rows


def cmd_eval(args) -> int:
    cfg = _resolve(args, seed=args.seed)
    out = _out_dir(args)
    _, normalized, prep = _load_inputs(cfg, args.panel)
    predictor = FactorPredictor(**cfg.predictor_kwargs())
    predictor.restore(normalized, prep.state_, args.checkpoint)
    rows = _test_metrics(predictor)
    metrics_path = out / "metrics.csv"
    evaluation.write_metrics_csv(rows, metrics_path)
    test = predictor.datasets_["test"]
    adjacency = predictor.adjacency(test.inputs[-1])[0]
    adjacency_path = out / "adjacency.csv"
    attention.adjacency_to_csv(adjacency, predictor.symbols_, adjacency_path)
    inputs = ([args.config] if args.config else []) + [args.panel, args.checkpoint]
    _write_manifest(out, "eval", cfg, args.config, inputs, [metrics_path, adjacency_path])
    for task, metric, value in rows:
        print(f"{task} {metric} {value:.6f}")
    return 0


def cmd_backtest(args) -> int:
    cfg = _resolve(args, seed=args.seed)
    out = _out_dir(args)
    panel, normalized, prep = _load_inputs(cfg, args.panel)
    predictor = FactorPredictor(**cfg.predictor_kwargs())
    predictor.restore(normalized, prep.state_, args.checkpoint)
    strategy = StrategyConfig(k=cfg.k, horizon=cfg.horizon,
                              open_threshold=cfg.open_threshold, cost=cfg.cost,
                              rebalance=cfg.rebalance)
    # forecasts start at the test split; input windows may reach back into
    # earlier history, as a live system's would
    t_in = predictor.t_in
    lo = max(t_in, normalized.n_ticks - _test_columns(cfg, normalized.n_ticks))
    times = np.arange(lo, normalized.n_ticks - strategy.horizon, strategy.rebalance,
                      dtype=np.int64)
    if times.size == 0:
        raise UsageError("test range too short for the backtest horizon")
    raw_prices = prep.state_.invert(normalized.values)
    forecasts = np.empty((times.size, normalized.n_series))
    for i, t in enumerate(times):
        window = normalized.values[:, t - t_in:t]
        forecasts[i] = predictor.forecast_prices(window)[0, :, strategy.horizon - 1]
    ledger = backtest(forecasts, times, raw_prices, strategy)
    ledger_path = out / "ledger.csv"
    evaluation.write_ledger_csv(ledger, ledger_path)
    returns_path = out / "returns.svg"
    returns_path.write_text(evaluation.svg_line_chart(ledger.times, ledger.cumulative_return))
    inputs = ([args.config] if args.config else []) + [args.panel, args.checkpoint]
    _write_manifest(out, "backtest", cfg, args.config, inputs, [ledger_path, returns_path])
    print(f"final return {ledger.final_return:.6f} "
          f"(long {ledger.long_pnl:.6f}, short {ledger.short_pnl:.6f}, "
          f"costs {ledger.total_costs:.6f}, positions {ledger.n_positions})")
    return 0


def _test_columns(cfg: RunConfig, n_ticks: int) -> int:
    from .panel import split_counts
    from .validation import check_ratios
    return split_counts(n_ticks, check_ratios(cfg.split))[2]


def cmd_segment(args) -> int:
    cfg = _resolve(args, seed=args.seed, breakpoints=args.breakpoints, eta=args.eta)
    out = _out_dir(args)
    series = _read_series_csv(args.input)
    seg = segment_dp(series, cfg.breakpoints)
    labels = label_change_points(series, seg, cfg.eta)
    payload = {
        "breakpoints": [int(b) for b in seg.breakpoints],
        "segment_costs": [float(c) for c in seg.segment_costs],
        "total_cost": float(seg.total_cost),
        "labels": [int(v) for v in labels.labels],
        "eta": float(cfg.eta),
    }
    seg_path = out / "segmentation.json"
    seg_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    inputs = ([args.config] if args.config else []) + [args.input]
    _write_manifest(out, "segment", cfg, args.config, inputs, [seg_path])
    print(f"breakpoints {payload['breakpoints']} labels {payload['labels']}")
    return 0


def _read_series_csv(path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip().split(",")[0]
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise UsageError(f"{path}: line {lineno}: expected a number, got {text!r}")
    if not values:
        raise UsageError(f"{path}: no numeric rows")
    return np.array(values)


def cmd_report(args) -> int:
    cfg = _resolve(args, seed=args.seed)
    out = _out_dir(args)
    metrics_rows = evaluation.read_metrics_csv(args.metrics)
    ledger = evaluation.read_ledger_csv(args.ledger)
    weights, symbols = attention.adjacency_from_csv(args.adjacency)
    paths = evaluation.emit_report(metrics_rows, ledger, weights, symbols, out)
    inputs = ([args.config] if args.config else []) + [args.metrics, args.ledger, args.adjacency]
    _write_manifest(out, "report", cfg, args.config, inputs, paths)
    print(f"wrote {len(paths)} report files to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factorcast",
        description="continual graph factor predictor for multivariate price panels")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic panel and its planted truth")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of series")
    p.add_argument("--t", type=int, default=None, help="number of ticks")
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--shifts", type=int, default=None, help="planted level shifts per series")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the predictor on a panel CSV")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--tasks", default=None, help='e.g. "pf" or "cpd,gap,ma,pf"')
    p.add_argument("--no-mi", action="store_true",
                   help="use loss-gradient importance instead of mutual information")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-split metrics for a checkpoint")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("backtest", help="top-K long/short simulation on the test range")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("segment", help="change-point segmentation of one series")
    common(p)
    p.add_argument("--input", required=True, help="one-column CSV")
    p.add_argument("--breakpoints", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("report", help="render SVG charts from eval/backtest outputs")
    common(p)
    p.add_argument("--metrics", required=True)
    p.add_argument("--ledger", required=True)
    p.add_argument("--adjacency", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> exit 1, scriptable
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
