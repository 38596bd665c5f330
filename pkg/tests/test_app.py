import argparse
import json
import logging

import numpy as np
import pytest
import yaml

from hebbmem import autodiff as ad
from hebbmem.app import main, parse_lengths
from hebbmem.checkpoint import load_model
from hebbmem.export import read_csv
from hebbmem.model import EpisodeBatch, run_batch
from hebbmem.tasks import load_episodes, predictions

SMALL_MODEL = [
    "--override", "model.tau_sim=20",
    "--override", "model.tau_read=10",
    "--override", "model.l=12",
    "--override", "model.input_encoder=10",
    "--override", "model.label_encoder=10",
]
SMALL_ASSOC = SMALL_MODEL + [
    "--override", "train.batch_size=4",
    "--override", "train.micro_batch=4",
    "--override", "train.eval_episodes=8",
]


@pytest.fixture(autouse=True)
def _isolated(monkeypatch, tmp_path):
    monkeypatch.delenv("HEBBMEM_PRESET", raising=False)
    monkeypatch.setenv("HEBBMEM_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr("hebbmem.config.user_config_dir", lambda app: str(tmp_path / "config" / app))


@pytest.fixture
def logged(monkeypatch, caplog):
    monkeypatch.setattr("hebbmem.app.setup_logging", lambda verbosity=0: None)
    monkeypatch.setattr(logging.getLogger("hebbmem"), "propagate", True)
    caplog.set_level(logging.INFO, logger="hebbmem")
    return caplog


def _summary(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.split())


def test_parse_lengths():
    assert parse_lengths("1..4") == [1, 2, 3, 4]
    assert parse_lengths("2,5") == [2, 5]
    for bad in ("", "a..b", "0..3", "x"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_lengths(bad)


def test_version_and_missing_command(capsys):
    assert main(["--version"]) == 0
    assert "hebbmem" in capsys.readouterr().out
    assert main([]) == 2


def test_gradcheck_passes(capsys):
    assert main(["train", "--task", "gradcheck"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert _summary(last)["task"] == "gradcheck"


def test_unknown_override_exits_with_two():
    assert main(["train", "--override", "train.bogus=1"]) == 2


def test_missing_checkpoint_exits_with_one(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 1


def test_train_then_eval_association(tmp_path, capsys):
    out = tmp_path / "assoc"
    assert main(["train", "--out", str(out), "--iterations", "2", "--seed", "3"] + SMALL_ASSOC) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert 0.0 <= float(_summary(line)["accuracy"]) <= 1.0
    assert (out / "checkpoint.hmem").is_file()
    assert len(read_csv(out / "metrics.csv")) == 2
    manifest = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 3
    assert manifest["config"]["train"]["iterations"] == 2
    assert manifest["command"].startswith("hebbmem train")

    assert main(["eval", "--out", str(out), "--episodes", "8", "--seed", "3"] + SMALL_ASSOC) == 0
    output = capsys.readouterr().out
    assert "task=assoc accuracy=" in output
    assert "key" in output


def test_ood_eval_writes_the_curve(tmp_path, capsys):
    out = tmp_path / "ood"
    small = SMALL_ASSOC + ["--override", "assoc.label_range=5", "--override", "assoc.n_test=3"]
    assert main(["train", "--task", "ood", "--out", str(out), "--iterations", "1"] + small) == 0
    capsys.readouterr()
    assert main(["eval", "--task", "ood", "--out", str(out), "--lengths", "1..3", "--episodes", "4"] + small) == 0
    rows = read_csv(out / "ood_curve.csv")
    assert [int(r["n_test"]) for r in rows] == [1, 2, 3]
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("task=ood")]
    assert len(lines) == 3


def test_baselines_write_flip_counts(tmp_path, capsys):
    out = tmp_path / "baselines"
    assert main(["baselines", "--pairs", "2", "--games", "50", "--out", str(out)]) == 0
    assert len(read_csv(out / "baseline_random.csv")) == 50
    optimal = read_csv(out / "baseline_optimal.csv")
    assert all(4 <= int(r["n_flips"]) <= 6 for r in optimal)
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fields = _summary(line)
    assert fields["task"] == "baselines" and fields["pairs"] == "2"


def test_baselines_reject_zero_games(tmp_path):
    assert main(["baselines", "--games", "0", "--out", str(tmp_path)]) == 2


def test_default_output_directory_comes_from_the_environment(tmp_path):
    assert main(["baselines", "--games", "5", "--seed", "4"]) == 0
    assert (tmp_path / "runs" / "baselines-seed4" / "run.json").is_file()


def test_config_prints_yaml(capsys, monkeypatch):
    monkeypatch.setenv("HEBBMEM_PRESET", "full")
    assert main(["config", "--task", "rl"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["ppo"]["n_envs"] == 64


def test_convert_demo_train_and_eval(tmp_path, capsys):
    out = tmp_path / "convert"
    assert main(["train", "--task", "convert-demo", "--out", str(out)]) == 0
    trained = _summary(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(trained["fidelity"].split(",")) == 2
    assert main(["eval", "--task", "convert-demo", "--out", str(out)]) == 0
    evaluated = _summary(capsys.readouterr().out.strip().splitlines()[-1])
    assert evaluated["fidelity"] == trained["fidelity"]


def test_rl_train_and_eval(tmp_path, capsys):
    out = tmp_path / "rl"
    small = SMALL_MODEL + [
        "--override", "ppo.n_envs=2",
        "--override", "ppo.minibatches=1",
        "--override", "ppo.rollout_steps=3",
        "--override", "ppo.hidden=8",
        "--override", "ppo.epochs=1",
        "--override", "ppo.eval_games=3",
        "--override", "ppo.max_game_steps=10",
    ]
    assert main(["train", "--task", "rl", "--pairs", "1", "--iterations", "1", "--out", str(out)] + small) == 0
    assert len(read_csv(out / "flip_counts.csv")) == 3
    capsys.readouterr()
    assert main(["eval", "--task", "rl", "--out", str(out), "--games", "2"] + small) == 0
    assert "task=rl mean_flips=" in capsys.readouterr().out


def test_eval_dumps_the_evaluated_episodes(tmp_path, capsys):
    out = tmp_path / "assoc"
    assert main(["train", "--out", str(out), "--iterations", "1"] + SMALL_ASSOC) == 0
    capsys.readouterr()
    dump = tmp_path / "episodes.csv"
    assert main(["eval", "--out", str(out), "--episodes", "8", "--dump-episodes", str(dump)] + SMALL_ASSOC) == 0
    accuracy = float(_summary(capsys.readouterr().out.strip().splitlines()[0])["accuracy"])

    episodes = load_episodes(dump)
    assert len(episodes) == 8
    params, model_config, _ = load_model(out / "checkpoint.hmem")
    batch = EpisodeBatch.from_episodes(episodes)
    with ad.no_grad():
        correct = predictions(run_batch(params, model_config, batch).logits.values) == batch.targets
    assert float(np.mean(correct)) == pytest.approx(accuracy, abs=1e-4)


def test_dump_episodes_needs_the_association_task(tmp_path):
    args = ["eval", "--task", "rl", "--out", str(tmp_path), "--dump-episodes", str(tmp_path / "e.csv")]
    assert main(args) == 2


def test_eval_refuses_a_run_of_another_task(tmp_path, logged):
    out = tmp_path / "convert"
    assert main(["train", "--task", "convert-demo", "--out", str(out)]) == 0
    (out / "checkpoint.hmem").write_bytes((out / "converted.hmem").read_bytes())
    assert main(["eval", "--out", str(out)] + SMALL_ASSOC) == 2
    assert "holds a 'convert-demo' run" in logged.text


def test_eval_warns_about_a_different_seed(tmp_path, logged):
    out = tmp_path / "convert"
    assert main(["train", "--task", "convert-demo", "--out", str(out), "--seed", "1"]) == 0
    assert main(["eval", "--task", "convert-demo", "--out", str(out), "--seed", "2"]) == 0
    assert "evaluating with seed 2" in logged.text


def test_unreadable_manifest_is_a_config_error(tmp_path):
    out = tmp_path / "convert"
    assert main(["train", "--task", "convert-demo", "--out", str(out)]) == 0
    (out / "run.json").write_text("{not json", encoding="utf-8")
    assert main(["eval", "--task", "convert-demo", "--out", str(out)]) == 2
