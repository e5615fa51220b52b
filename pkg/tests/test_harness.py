import json
import math

import yaml

from dasolab.config import config_to_dict, with_overrides
from dasolab.harness import ABLATION_ARMS, aggregate, format_report, main, metrics_csv
from dasolab.learner import run_training


def _write_cfg(tmp_path, cfg):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    return str(path)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_bad_config_exits_with_key(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("bank:\n  T_proto: -1\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
    assert "bank.T_proto" in capsys.readouterr().err


def test_run_writes_artifacts(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["run", "--config", _write_cfg(tmp_path, tiny_cfg), "--out", str(out)]) == 0
    for name in ("config.yaml", "metrics.csv", "summary.json", "status", "metadata.json"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert 0 <= summary["balanced_acc_median20"] <= 1
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,metric,class,value"


def test_metrics_csv_is_byte_identical(tiny_cfg):
    assert metrics_csv(run_training(tiny_cfg).history) == metrics_csv(run_training(tiny_cfg).history)


def test_ablate_produces_every_arm(tmp_path, tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"run.total_steps": 20, "run.eval_interval": 10})
    out = tmp_path / "abl"
    assert main(["ablate", "--config", _write_cfg(tmp_path, cfg), "--seeds", "1", "--out", str(out)]) == 0
    runs = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(runs) == len(ABLATION_ARMS) == 8
    assert all((p / "summary.json").is_file() for p in runs)
    table = (out / "comparison.md").read_text()
    for arm in ABLATION_ARMS:
        assert f"| {arm} |" in table


def test_sweep_runs_grid(tmp_path, tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"run.total_steps": 20, "run.eval_interval": 10})
    out = tmp_path / "sw"
    grid = "{loss.tau: [0.7, 0.9], tracker.T_dist: [1.0]}"
    assert main(["sweep", "--config", _write_cfg(tmp_path, cfg), "--grid", grid, "--out", str(out)]) == 0
    assert len([p for p in out.iterdir() if p.is_dir()]) == 2


def test_report_mean_and_std(tmp_path, capsys, tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"run.total_steps": 20, "run.eval_interval": 10})
    path = _write_cfg(tmp_path, cfg)
    for seed in range(3):
        assert main(["run", "--config", path, "--seed", str(seed), "--out", str(tmp_path / f"s{seed}")]) == 0
    dirs = [str(tmp_path / f"s{seed}") for seed in range(3)]
    assert main(["report", *dirs]) == 0
    out = capsys.readouterr().out
    assert "| run |" in out and "±" in out
    vals = [json.loads((tmp_path / f"s{s}" / "summary.json").read_text())["balanced_acc_median20"] for s in range(3)]
    mean = sum(vals) / 3
    std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 3)
    assert f"{100 * mean:.2f}±{100 * std:.2f}" in out


def test_aggregate_skips_failed_runs():
    ok = {"config_echo": {"run": {"name": "a"}}, "status": "ok", "balanced_acc_median20": 0.5}
    bad = {"config_echo": {"run": {"name": "a"}}, "status": "failed", "balanced_acc_median20": 0.0}
    assert aggregate([ok, bad])["a"]["balanced_acc_median20"] == (0.5, 0.0, 1)
    assert "50.00±0.00" in format_report([ok, bad])


def test_report_with_no_runs(tmp_path):
    assert main(["report", str(tmp_path)]) == 1
