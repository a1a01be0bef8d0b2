import json
from pathlib import Path

import numpy as np
import pytest

from factorcast.cli import main
from factorcast.evaluation import read_ledger_csv, read_metrics_csv
from factorcast.panel import read_truth_json
from factorcast.targets import segment_dp

TINY_SETS = ["--set", "windows=12,4,8,16", "--set", "channels=4", "--set", "feature_dim=8",
             "--set", "head_hidden=8", "--set", "attention_dim=4", "--set", "stride=8",
             "--set", "epochs=2", "--set", "batch_size=16"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate", "--out", str(data), "--n", "3", "--t", "700",
                 "--seed", "3"]) == 0
    run = root / "run"
    assert main(["train", "--panel", str(data / "panel.csv"), "--out", str(run),
                 "--seed", "3", *TINY_SETS]) == 0
    return root


class TestGenerate:
    def test_outputs_reproducible(self, tmp_path):
        args = ["generate", "--n", "4", "--t", "300", "--seed", "7"]
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(args + ["--out", str(out)]) == 0
            blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                          if p.name != "manifest.json"})
        assert blobs[0] == blobs[1]
        assert set(blobs[0]) == {"panel.csv", "truth.json"}

    def test_missing_required_flag_exits_2(self, capsys):
        assert main(["generate", "--n", "4"]) == 2

    def test_noiseless_change_points_recovered_by_dp(self, tmp_path):
        out = tmp_path / "clean"
        assert main(["generate", "--out", str(out), "--n", "3", "--t", "400",
                     "--seed", "11", "--noise", "0", "--shifts", "1"]) == 0
        truth = read_truth_json(out / "truth.json")
        from factorcast.panel import ingest_csv
        panel = ingest_csv(out / "panel.csv")
        for i in range(panel.n_series):
            seg = segment_dp(panel.values[i], 1)
            assert seg.breakpoints[0] == truth.change_points[i][0]

    def test_manifest_lists_outputs_and_seed(self, tmp_path):
        out = tmp_path / "m"
        assert main(["generate", "--out", str(out), "--n", "3", "--t", "200",
                     "--seed", "9"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["seed"] == 9
        assert manifest["outputs"] == ["panel.csv", "truth.json"]


class TestTrain:
    def test_artifacts_written(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.bin").exists()
        assert (run / "training_log.csv").exists()
        assert (run / "manifest.json").exists()

    def test_pf_only_ablation(self, workspace, tmp_path):
        data = workspace / "data"
        out = tmp_path / "pf_only"
        assert main(["train", "--panel", str(data / "panel.csv"), "--out", str(out),
                     "--seed", "3", "--tasks", "pf", *TINY_SETS]) == 0
        lines = (out / "training_log.csv").read_text().strip().splitlines()[1:]
        assert all(line.split(",")[1] == "pf" for line in lines)

    def test_no_mi_flag(self, workspace, tmp_path):
        data = workspace / "data"
        out = tmp_path / "no_mi"
        assert main(["train", "--panel", str(data / "panel.csv"), "--out", str(out),
                     "--seed", "3", "--no-mi", "--epochs", "1", *TINY_SETS[:-2]]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["parameters"]["use_mi"] is False

    def test_deterministic_rerun_bytes(self, workspace, tmp_path):
        data = workspace / "data"
        out = tmp_path / "rerun"
        blobs = []
        for _ in range(2):
            assert main(["train", "--panel", str(data / "panel.csv"), "--out", str(out),
                         "--seed", "3", *TINY_SETS]) == 0
            blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert blobs[0] == blobs[1]

    def test_unknown_config_key_exits_2(self, workspace, capsys):
        data = workspace / "data"
        rc = main(["train", "--panel", str(data / "panel.csv"), "--out", "/tmp/x",
                   "--set", "bogus=1"])
        assert rc == 2

    def test_config_file_and_override(self, workspace, tmp_path):
        data = workspace / "data"
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# tiny run\nepochs = 1\nchannels = 4\nfeature_dim = 8\n"
                       "head_hidden = 8\nattention_dim = 4\nstride = 8\n"
                       "windows = 12,4,8,16\nbatch_size = 16\n")
        out = tmp_path / "cfgrun"
        assert main(["train", "--config", str(cfg), "--panel", str(data / "panel.csv"),
                     "--out", str(out), "--seed", "4"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["parameters"]["epochs"] == 1
        assert manifest["parameters"]["seed"] == 4
        assert str(cfg) in manifest["inputs"]


class TestEvalBacktest:
    def test_eval_writes_finite_metrics(self, workspace, tmp_path):
        data, run = workspace / "data", workspace / "run"
        out = tmp_path / "eval"
        assert main(["eval", "--panel", str(data / "panel.csv"),
                     "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(out), "--seed", "3", *TINY_SETS]) == 0
        rows = read_metrics_csv(out / "metrics.csv")
        assert rows
        assert all(np.isfinite(v) for _, _, v in rows)
        tasks = {t for t, _, _ in rows}
        assert {"pf", "pf_price", "gap", "ma", "cpd"} <= tasks
        assert (out / "adjacency.csv").exists()

    def test_eval_untrained_checkpoint_no_crash(self, workspace, tmp_path):
        data = workspace / "data"
        fresh = tmp_path / "fresh"
        assert main(["train", "--panel", str(data / "panel.csv"), "--out", str(fresh),
                     "--seed", "8", *TINY_SETS[:-2], "--set", "epochs=0"]) == 0
        out = tmp_path / "eval0"
        assert main(["eval", "--panel", str(data / "panel.csv"),
                     "--checkpoint", str(fresh / "checkpoint.bin"),
                     "--out", str(out), "--seed", "8", *TINY_SETS[:-2],
                     "--set", "epochs=0"]) == 0
        rows = read_metrics_csv(out / "metrics.csv")
        assert all(np.isfinite(v) for _, _, v in rows)

    def test_backtest_ledger_identity(self, workspace, tmp_path):
        data, run = workspace / "data", workspace / "run"
        out = tmp_path / "bt"
        assert main(["backtest", "--panel", str(data / "panel.csv"),
                     "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(out), "--seed", "3", *TINY_SETS]) == 0
        ledger = read_ledger_csv(out / "ledger.csv")
        assert ledger.final_return == ledger.long_pnl + ledger.short_pnl - ledger.total_costs
        svg = (out / "returns.svg").read_text()
        assert svg.count("<polyline") <= 1

    def test_version_mismatch_names_versions(self, workspace, tmp_path):
        data, run = workspace / "data", workspace / "run"
        bad = tmp_path / "bad.bin"
        blob = bytearray((run / "checkpoint.bin").read_bytes())
        blob[4:6] = (77).to_bytes(2, "little")
        bad.write_bytes(bytes(blob))
        out = tmp_path / "evalbad"
        rc = main(["eval", "--panel", str(data / "panel.csv"), "--checkpoint", str(bad),
                   "--out", str(out), "--seed", "3", *TINY_SETS])
        assert rc == 1


class TestSegmentReport:
    def test_segment_json(self, tmp_path):
        series = tmp_path / "series.csv"
        series.write_text("value\n" + "\n".join(["100.0"] * 6 + ["110.0"] * 6) + "\n")
        out = tmp_path / "seg"
        assert main(["segment", "--input", str(series), "--out", str(out),
                     "--breakpoints", "1", "--eta", "0.02"]) == 0
        payload = json.loads((out / "segmentation.json").read_text())
        assert payload["breakpoints"] == [6]
        assert payload["labels"] == [1]
        assert payload["total_cost"] == 0.0

    def test_segment_headerless(self, tmp_path):
        series = tmp_path / "series.csv"
        series.write_text("\n".join(str(100 + i) for i in range(12)) + "\n")
        out = tmp_path / "seg2"
        assert main(["segment", "--input", str(series), "--out", str(out)]) == 0
        payload = json.loads((out / "segmentation.json").read_text())
        assert len(payload["breakpoints"]) == 1

    def test_report_from_artifacts(self, workspace, tmp_path):
        data, run = workspace / "data", workspace / "run"
        eval_out = tmp_path / "eval"
        bt_out = tmp_path / "bt"
        assert main(["eval", "--panel", str(data / "panel.csv"),
                     "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(eval_out), "--seed", "3", *TINY_SETS]) == 0
        assert main(["backtest", "--panel", str(data / "panel.csv"),
                     "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(bt_out), "--seed", "3", *TINY_SETS]) == 0
        report = tmp_path / "report"
        assert main(["report", "--metrics", str(eval_out / "metrics.csv"),
                     "--ledger", str(bt_out / "ledger.csv"),
                     "--adjacency", str(eval_out / "adjacency.csv"),
                     "--out", str(report)]) == 0
        names = {p.name for p in report.iterdir()}
        assert {"metrics.csv", "ledger.csv", "returns.svg", "network.svg",
                "manifest.json"} <= names
