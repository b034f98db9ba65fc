import csv
import json

import numpy as np
import pytest

import cli
from algorithms import save_policy
from checks import CheckResult
from conftest import fake_reference
from datagen import load, save

TRAIN_FLAGS = ["--steps", "4", "--log-every", "2", "--checkpoint-every", "2", "--batch-size", "16",
               "--hidden-width", "8", "--hidden-layers", "2", "--N", "2"]


@pytest.fixture
def dataset_file(tmp_path, medium_dataset, reference):
    path = save(medium_dataset, tmp_path / "data" / "pm-medium.odrl")
    save_policy(reference.medium, cli.behavior_policy_path(path, "medium"))
    return path


def train(dataset_file, out, *extra):
    return cli.main(["train", "--data", str(dataset_file), "--algo", "edac", *TRAIN_FLAGS, "--out", str(out), *extra])


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["check", "physics"],
    ["train", "--steps", "many"],
    ["train", "--beta", "hot"],
])
def test_usage_errors_exit_1(argv):
    assert cli.main(argv) == 1


def test_eta_needs_edac(capsys):
    assert cli.main(["train", "--algo", "sac-n", "--eta", "1", "--print-config"]) == 2
    assert cli.main(["train", "--algo", "sac-n", "--eta", "0", "--print-config"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["train"]["algorithm"] == "sac-n" and printed["train"]["eta"] == 0.0


def test_config_file_round_trip(tmp_path, capsys):
    assert cli.main(["train", "--algo", "edac", "--N", "5", "--beta", "0.2", "--print-config"]) == 0
    first = capsys.readouterr().out
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(first)
    assert cli.main(["train", "--config", str(cfg_file), "--print-config"]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["train"]["N"] == 5


def test_flags_override_config_file(tmp_path, capsys):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"train": {"algorithm": "edac", "N": 4}}))
    assert cli.main(["train", "--config", str(cfg_file), "--N", "6", "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["N"] == 6


def test_unknown_config_key_exits_2(tmp_path):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"train": {"temperature": 1}}))
    assert cli.main(["train", "--config", str(cfg_file), "--print-config"]) == 2
    cfg_file.write_text("{not json")
    assert cli.main(["train", "--config", str(cfg_file), "--print-config"]) == 2


def test_unknown_tier_names_the_valid_ones(tmp_path, caplog):
    assert cli.main(["gen-data", "--tier", "medium-random", "--out", str(tmp_path)]) == 2
    assert "medium-replay" in caplog.text and "full-replay" in caplog.text


def test_unknown_environment_exits_2(tmp_path):
    assert cli.main(["gen-data", "--env", "hopper", "--out", str(tmp_path)]) == 2


def test_gen_data_writes_dataset_and_behavior_policy(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "get_reference_run", lambda spec, seed, cache, steps: fake_reference(spec, seed))
    assert cli.main(["gen-data", "--tier", "medium", "--n", "150", "--out", str(tmp_path)]) == 0
    path = tmp_path / "pointmass1d-medium.odrl"
    assert len(load(path)) == 150
    assert (tmp_path / "pointmass1d-medium.medium.ckpt").exists()
    assert "150 transitions" in capsys.readouterr().out


@pytest.mark.parametrize("passed, code", [(True, 0), (False, 3)])
def test_check_exit_codes(monkeypatch, capsys, passed, code):
    monkeypatch.setattr(cli, "run_suite", lambda suite: [CheckResult("stub", 0.1, 1.0, passed)])
    assert cli.main(["check", "math"]) == code
    assert "stub" in capsys.readouterr().out


def test_train_eval_analyze(tmp_path, dataset_file, capsys):
    assert train(dataset_file, tmp_path / "runs") == 0
    run_dir = tmp_path / "runs" / "pm-medium-edac-N2-seed0"
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [2, 4]
    assert all(json.loads(line)["es_loss"] is not None for line in lines)
    checkpoints = sorted(p.name for p in run_dir.glob("ckpt-*.ckpt"))
    assert checkpoints == ["ckpt-00000002.ckpt", "ckpt-00000004.ckpt"]
    assert json.loads((run_dir / "config.json").read_text())["train"]["total_steps"] == 4

    capsys.readouterr()
    final = run_dir / "ckpt-00000004.ckpt"
    assert cli.main(["eval", "--data", str(dataset_file), "--checkpoint", str(final), "--episodes", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["episodes"] == 3 and len(report["returns"]) == 3
    assert report["checkpoint"] == str(final)

    assert cli.main(["eval", "--data", str(dataset_file), "--random", "--episodes", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["checkpoint"] == "random"

    assert cli.main(["analyze", "--data", str(dataset_file), "--run-dir", str(run_dir),
                     "--batch", "32", "--bins", "5"]) == 0
    penalties = read_csv(run_dir / "penalty_report.csv")
    assert [row[0] for row in penalties[1:]] == ["2", "4"]
    assert len(read_csv(run_dir / "cossim.csv")) == 3
    assert len(read_csv(run_dir / "action_dist.csv")) == 6


def test_training_is_reproducible(tmp_path, dataset_file):
    assert train(dataset_file, tmp_path / "a") == 0
    assert train(dataset_file, tmp_path / "b") == 0
    name = "pm-medium-edac-N2-seed0/ckpt-00000004.ckpt"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class PoisonedAfter:
    """Serves real minibatches, then NaN rewards from the given sample call on"""

    def __init__(self, dataset, good_samples: int):
        self.dataset = dataset
        self.spec = dataset.spec
        self.good_samples = good_samples
        self.calls = 0

    def sample(self, batch_size, rng):
        batch = self.dataset.sample(batch_size, rng)
        self.calls += 1
        if self.calls > self.good_samples:
            return batch._replace(rewards=np.full_like(batch.rewards, np.nan))
        return batch


def test_non_finite_loss_exits_3_and_keeps_last_checkpoint(tmp_path, dataset_file, monkeypatch, caplog):
    real_load = cli.load
    monkeypatch.setattr(cli, "load", lambda path: PoisonedAfter(real_load(path), good_samples=2))
    assert train(dataset_file, tmp_path / "runs") == 3
    run_dir = tmp_path / "runs" / "pm-medium-edac-N2-seed0"
    assert sorted(p.name for p in run_dir.glob("ckpt-*.ckpt")) == ["ckpt-00000002.ckpt"]
    assert "ckpt-00000002.ckpt" in caplog.text
    assert "non-finite loss at step 2" in caplog.text
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [2]


def test_missing_dataset_exits_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "absent.odrl"), *TRAIN_FLAGS]) == 2
    assert cli.main(["eval", "--data", str(tmp_path / "absent.odrl"), "--random"]) == 2
