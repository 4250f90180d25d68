import json
import math
import subprocess
import sys

import numpy as np
import pytest
import torch

import ciuda.runner as runner_mod
import ciuda.selftest as selftest_mod
from ciuda.cli import main
from ciuda.data.schedules import build_schedule

FAST = ["benchmark_id=synthetic", "epochs_per_step=1", "synthetic.n_per_class=30"]


@pytest.fixture(scope="module")
def officehome_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("oh")
    for domain in ("Art", "Clipart"):
        for name in build_schedule("officehome").class_names:
            d = root / domain / name.replace(" ", "_")
            d.mkdir(parents=True)
            np.save(d / "0.npy", np.zeros(3))
    return root


def test_prepare_officehome_and_rerun_is_idempotent(officehome_root, tmp_path, capsys):
    args = ["prepare", "--benchmark", "officehome", "--data-root", str(officehome_root),
            "--source-domain", "Art", "--target-domain", "Clipart", "--out", str(tmp_path)]
    assert main(args) == 0
    sched = json.loads((tmp_path / "schedule.json").read_text())
    assert len(sched["steps"]) == 6 and sched["step_class_names"][0][0] == "Drill"
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert set(first) == {"schedule.json", "manifest_Art.json", "manifest_Clipart.json"}
    assert main(args) == 0
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == first
    assert "6 steps" in capsys.readouterr().out


def test_prepare_bad_root_exits_nonzero(tmp_path, capsys):
    rc = main(["prepare", "--benchmark", "office31", "--data-root", str(tmp_path / "missing"), "--out", str(tmp_path)])
    assert rc == 2 and "does not exist" in capsys.readouterr().err


def test_prepare_synthetic_writes_data(tmp_path):
    assert main(["prepare", "--benchmark", "synthetic", "--data-root", str(tmp_path / "data"), "--out", str(tmp_path / "out")]) == 0
    assert len(list((tmp_path / "data" / "target").rglob("*.npy"))) == 12 * 200


def test_train_eval_report(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *FAST, "--run-dir", str(run), "--seed", "3"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= out["final"] <= 100
    for name in ("metrics.json", "aggregate.csv", "per_task.csv", "config.yaml", "predictions.csv"):
        assert (run / name).exists()
    assert "seed: 3" in (run / "config.yaml").read_text()
    assert main(["eval", "--run-dir", str(run)]) == 0
    assert "agree" in capsys.readouterr().out
    # a tampered report is caught by the recount
    m = json.loads((run / "metrics.json").read_text())
    m["aggregate"]["avg_final"] = -1
    (run / "metrics.json").write_text(json.dumps(m))
    assert main(["eval", "--run-dir", str(run)]) == 2
    assert main(["eval", "--run-dir", str(run), "--out", str(tmp_path / "fixed")]) == 2
    (run / "metrics.json").unlink()
    assert main(["eval", "--run-dir", str(run)]) == 0
    assert main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "aggregate.csv").exists()


def test_seed_reproducibility_and_source_free_route(tmp_path):
    for name in ("a", "b"):
        assert main(["train", *FAST, "--run-dir", str(tmp_path / name), "--seed", "1"]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert main(["train", *FAST, "--run-dir", str(tmp_path / "sf"), "--mode", "source_free"]) == 0
    stages = {json.loads(l)["stage"] for l in (tmp_path / "sf" / "loss_log.jsonl").read_text().splitlines()}
    assert stages == {"pretrain", "deploy"}


def test_configuration_errors(tmp_path, capsys):
    assert main(["train", "epochs_per_step=1", "--run-dir", str(tmp_path)]) == 1
    assert "benchmark_id" in capsys.readouterr().err
    assert main(["train", *FAST, "learning_rate=3", "--run-dir", str(tmp_path)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["train", *FAST])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(runner_mod, "loss_div", lambda e: e.sum() * float("nan"))
    assert main(["train", *FAST, "--run-dir", str(tmp_path)]) == 3


def test_cache_verb(tmp_path, capsys):
    assert main(["cache", *FAST, "--cache-dir", str(tmp_path)]) == 0
    assert main(["cache", *FAST, "--cache-dir", str(tmp_path)]) == 0
    assert "hit rate 100.00%" in capsys.readouterr().out


def test_selftest_quick_passes(capsys):
    assert main(["selftest", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "7/7" in out


def test_selftest_catches_wrong_log_base(monkeypatch, capsys):
    real = selftest_mod.js_divergence
    monkeypatch.setattr(selftest_mod, "js_divergence", lambda p, q: real(p, q) / math.log(2))
    assert main(["selftest", "--quick"]) == 1
    assert "FAIL  js divergence bounds" in capsys.readouterr().out


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "ciuda.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "selftest" in out.stdout
