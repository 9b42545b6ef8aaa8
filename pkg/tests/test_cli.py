from __future__ import annotations

import csv
import json

import pytest

from taltransfer.cli import main
from taltransfer.data import load_csv
from taltransfer.generator import GeneratorConfig, WeatherParams, default_task_params
from taltransfer.harness import ExperimentConfig
from taltransfer.tal import TalConfig
from taltransfer.training import TrainConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(d / "data.csv"), "--tasks", "4", "--seasons", "3", "--seed", "2"]) == 0
    cfg = d / "train.json"
    cfg.write_text(json.dumps(TrainConfig(variant="embedding", hidden1=8, hidden2=12).to_dict()))
    tasks = ",".join(load_csv(d / "data.csv").task_ids[:3])
    rc = main(["train", "--data", str(d / "data.csv"), "--out", str(d / "m.npz"), "--config", str(cfg),
               "--epochs", "3", "--tasks", tasks, "--log", str(d / "log.csv")])
    assert rc == 0
    return d


def test_train_outputs(workdir):
    assert (workdir / "m.npz").exists()
    assert len((workdir / "log.csv").read_text().splitlines()) == 4


def test_transfer_end_to_end(workdir, capsys):
    target = load_csv(workdir / "data.csv").task_ids[3]
    out = workdir / "tr"
    rc = main(["transfer", "--bundle", str(workdir / "m.npz"), "--target", str(workdir / "data.csv"),
               "--task", target, "--task-set", "S+CR", "--out-dir", str(out)])
    assert rc == 0
    rows = list(csv.DictReader((out / "predictions.csv").open()))
    assert {r["task_id"] for r in rows} == {target}
    assert len(rows) == sum(s.length for s in load_csv(workdir / "data.csv").tasks[target])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["task_set"] == "S+CR" and len(manifest["entries"]) == 3 + 68
    assert "Weighted (S+CR)" in capsys.readouterr().out


def test_transfer_needs_task_for_multi_task_csv(workdir, capsys):
    rc = main(["transfer", "--bundle", str(workdir / "m.npz"), "--target", str(workdir / "data.csv"),
               "--out-dir", str(workdir / "x")])
    assert rc == 2 and "--task" in capsys.readouterr().err


def test_errors_exit_two(workdir, capsys):
    assert main(["train", "--data", str(workdir / "missing.csv"), "--out", str(workdir / "z.npz")]) == 2
    assert main(["transfer", "--bundle", str(workdir / "m.npz"), "--target", str(workdir / "data.csv"),
                 "--task", "nope", "--out-dir", str(workdir / "y")]) == 2
    err = capsys.readouterr().err
    assert err.count("error:") == 2


def test_plot(workdir):
    ds = load_csv(workdir / "data.csv")
    t = ds.task_ids[3]
    label = ds.tasks[t][0].season_label
    rc = main(["plot", "--bundle", str(workdir / "m.npz"), "--data", str(workdir / "data.csv"), "--task", t,
               "--season", label, "--out-dir", str(workdir / "plots"), "--sets", "S,S+LR-3", "--n-random", "4"])
    assert rc == 0
    assert sorted(p.name for p in (workdir / "plots").iterdir()) == ["lte50_S.svg", "lte50_S_LR_3.svg"]


def test_evaluate_and_sweep(tmp_path, capsys):
    gen = GeneratorConfig(tuple(default_task_params(3, seed=1)), WeatherParams(seed=3), 3, 2000)
    cfg = ExperimentConfig(generator=gen, trials=1, holdout=1, oracles=False,
                           train=TrainConfig(epochs=2, hidden1=6, hidden2=8),
                           methods=(TalConfig(weighting="uniform"), TalConfig()))
    path = tmp_path / "exp.json"
    cfg.save(path)
    assert main(["evaluate", "--config", str(path), "--out-dir", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "holdout audit: 3 runs clean" in out
    assert (tmp_path / "ev" / "report.csv").read_text().splitlines()[0] == "task,Uniform (S),Weighted (S)"
    assert main(["sweep", "--config", str(path), "--axis", "tau", "--values", "5,20", "--task-set", "S"]) == 0
    assert "Ex-20 (S)" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--variant", "multihead", "--seeds", "1"]) == 0
    assert "PASS" in capsys.readouterr().out
