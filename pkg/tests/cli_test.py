"""
End-to-end tests of the command-line group on a tiny problem.
"""
import logging
import os

import numpy as np
import pytest
from click.testing import CliRunner

from ifnoapp import create_cli
from ifnoapp.constants import LOSS_HISTORY_HEADER
from ifnoapp.storage import read_tensor, write_tensor

SMALL_CONFIG = """\
task=dline
grid=8
n_train=4
n_test=2
eta=0.0
d=2
modes=2
blocks=1
hidden=8
z_dim=4
vae_channels=4,8
batch=2
epochs1=1
epochs2=1
epochs3=1
seed=0
n_maps=2
uncertainty_samples=3
ablation_blocks=1,2
"""


@pytest.fixture
def cli():
    return create_cli({"level": logging.WARNING})


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return str(path)


@pytest.fixture
def data_dir(cli, runner, config_path, tmp_path):
    out = str(tmp_path / "data")
    result = runner.invoke(cli, ["gen-data", "--config", config_path, "--out", out])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def run_dir(cli, runner, config_path, data_dir, tmp_path):
    out = str(tmp_path / "run")
    result = runner.invoke(cli, ["train", "--config", config_path, "--data", data_dir,
                                 "--out", out])
    assert result.exit_code == 0, result.output
    return out


def _tensors(directory):
    return {name: read_tensor(os.path.join(directory, name))
            for name in sorted(os.listdir(directory)) if name.endswith(".tnsr")}


def _file_bytes(directory):
    contents = {}
    for root, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(root, name)
            with open(path, "rb") as handle:
                contents[os.path.relpath(path, directory)] = handle.read()
    return contents


def test_gen_data_writes_dataset(data_dir):
    assert os.path.isfile(os.path.join(data_dir, "a_00005.tnsr"))
    assert not os.path.exists(os.path.join(data_dir, "a_00006.tnsr"))
    with open(os.path.join(data_dir, "dataset.txt"), "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    assert len(lines) == 7
    assert "kind=dline" in lines[0]
    assert "split=train" in lines[1] and "split=test" in lines[-1]
    assert read_tensor(os.path.join(data_dir, "u_00000.tnsr")).shape == (8, 8)
    assert os.path.isfile(os.path.join(data_dir, "stats", "sigma_f.tnsr"))
    assert os.path.isfile(os.path.join(data_dir, "config.txt"))


def test_gen_data_is_reproducible(cli, runner, config_path, data_dir, tmp_path):
    again = str(tmp_path / "again")
    runner.invoke(cli, ["gen-data", "--config", config_path, "--out", again])
    first, second = _tensors(data_dir), _tensors(again)
    assert first.keys() == second.keys()
    assert all(np.array_equal(first[name], second[name]) for name in first)


def test_train_writes_stage_checkpoints(run_dir):
    for name in ("stage1", "stage2", "final"):
        checkpoint = os.path.join(run_dir, "checkpoints", name)
        assert os.path.isfile(os.path.join(checkpoint, "manifest.txt"))
        assert os.path.isfile(os.path.join(checkpoint, "meta.txt"))
    with open(os.path.join(run_dir, "losses.csv"), "r", encoding="utf-8") as handle:
        rows = handle.read().splitlines()
    assert rows[0] == LOSS_HISTORY_HEADER
    assert [row.split(",")[1] for row in rows[1:]] == ["1", "2", "3"]


def test_resume_matches_uninterrupted_training(cli, runner, config_path, data_dir, run_dir):
    final = os.path.join(run_dir, "checkpoints", "final")
    before = _tensors(final)
    result = runner.invoke(cli, ["train", "--config", config_path, "--data", data_dir,
                                 "--out", run_dir, "--resume-from", "stage3"])
    assert result.exit_code == 0, result.output
    after = _tensors(final)
    assert all(np.array_equal(before[name], after[name]) for name in before)


def test_eval_writes_metrics_and_maps(cli, runner, config_path, data_dir, run_dir, tmp_path):
    out = str(tmp_path / "eval")
    result = runner.invoke(cli, ["eval", "--checkpoint", os.path.join(run_dir, "checkpoints", "final"),
                                 "--data", data_dir, "--out", out, "--config", config_path])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "metrics.csv"), "r", encoding="utf-8") as handle:
        rows = handle.read().splitlines()
    assert rows[0] == "sample,rel_l2_fwd,rel_l2_inv"
    assert len(rows) == 3
    for name in ("summary.txt", "baseline.txt", "error_fwd_00001.tnsr", "error_inv_00000.csv"):
        assert os.path.isfile(os.path.join(out, name))
    assert "forward" in result.output


def test_predict_and_sample(cli, runner, data_dir, run_dir, tmp_path):
    checkpoint = os.path.join(run_dir, "checkpoints", "final")
    field = os.path.join(data_dir, "u_00004.tnsr")
    out = str(tmp_path / "pred")
    result = runner.invoke(cli, ["predict", "--checkpoint", checkpoint, "--input", field,
                                 "--direction", "inv", "--out", out])
    assert result.exit_code == 0, result.output
    assert read_tensor(os.path.join(out, "prediction.tnsr")).shape == (8, 8)

    stack = str(tmp_path / "stack.tnsr")
    write_tensor(stack, np.stack([read_tensor(os.path.join(data_dir, f"a_0000{k}.tnsr"))
                                  for k in (4, 5)]))
    result = runner.invoke(cli, ["predict", "--checkpoint", checkpoint, "--input", stack,
                                 "--out", out])
    assert result.exit_code == 0, result.output
    assert read_tensor(os.path.join(out, "prediction.tnsr")).shape == (2, 8, 8)

    sampled = str(tmp_path / "sample")
    result = runner.invoke(cli, ["sample", "--checkpoint", checkpoint, "--input", field,
                                 "--out", sampled, "--samples", "4", "--seed", "1"])
    assert result.exit_code == 0, result.output
    std = read_tensor(os.path.join(sampled, "std.tnsr"))
    assert std.shape == (8, 8) and np.all(std >= 0.0)
    assert os.path.isfile(os.path.join(sampled, "mean.csv"))


def test_ablate_writes_one_row_per_depth(cli, runner, config_path, data_dir, tmp_path):
    out = str(tmp_path / "ablate")
    result = runner.invoke(cli, ["ablate", "--config", config_path, "--data", data_dir,
                                 "--out", out])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "ablation.csv"), "r", encoding="utf-8") as handle:
        rows = handle.read().splitlines()
    assert rows[0] == "blocks,rel_l2_fwd,rel_l2_inv"
    assert [row.split(",")[0] for row in rows[1:]] == ["1", "2"]


def test_missing_dataset_exits_with_config_code(cli, runner, config_path, tmp_path):
    result = runner.invoke(cli, ["train", "--config", config_path,
                                 "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")])
    assert result.exit_code == 2
    assert "Error: Storage error" in result.output


def test_unknown_config_key_exits_with_config_code(cli, runner, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("gird=8\n", encoding="utf-8")
    result = runner.invoke(cli, ["gen-data", "--config", str(path), "--out", str(tmp_path / "d")])
    assert result.exit_code == 2
    assert "Invalid configuration" in result.output


def test_fingerprint_mismatch_exits_with_config_code(cli, runner, data_dir, run_dir, tmp_path):
    other = tmp_path / "other.cfg"
    other.write_text(SMALL_CONFIG.replace("d=2", "d=4"), encoding="utf-8")
    result = runner.invoke(cli, ["eval", "--checkpoint", os.path.join(run_dir, "checkpoints", "final"),
                                 "--data", data_dir, "--out", str(tmp_path / "e"),
                                 "--config", str(other)])
    assert result.exit_code == 2
    assert "Checkpoint mismatch" in result.output


def test_divergence_exits_with_code_four(cli, runner, config_path, data_dir, tmp_path):
    write_tensor(os.path.join(data_dir, "a_00000.tnsr"), np.full((8, 8), np.nan))
    result = runner.invoke(cli, ["train", "--config", config_path, "--data", data_dir,
                                 "--out", str(tmp_path / "diverged")])
    assert result.exit_code == 4
    assert "stage 1 epoch 1" in result.output


def test_repeated_runs_write_identical_bytes(cli, runner, config_path, data_dir, run_dir,
                                             tmp_path):
    data_again = str(tmp_path / "data_again")
    runner.invoke(cli, ["gen-data", "--config", config_path, "--out", data_again])
    assert _file_bytes(data_dir) == _file_bytes(data_again)

    run_again = str(tmp_path / "run_again")
    result = runner.invoke(cli, ["train", "--config", config_path, "--data", data_dir,
                                 "--out", run_again])
    assert result.exit_code == 0, result.output
    first, second = _file_bytes(run_dir), _file_bytes(run_again)
    assert sorted(first) == sorted(second)
    assert all(first[name] == second[name] for name in first)

    checkpoint = os.path.join(run_dir, "checkpoints", "final")
    outputs = []
    for name in ("eval_first", "eval_second"):
        out = str(tmp_path / name)
        result = runner.invoke(cli, ["eval", "--checkpoint", checkpoint, "--data", data_dir,
                                     "--out", out, "--config", config_path])
        assert result.exit_code == 0, result.output
        outputs.append(_file_bytes(out))
    assert outputs[0] == outputs[1]


def test_profile_option_is_echoed(cli, runner, config_path, data_dir, tmp_path):
    out = str(tmp_path / "desk")
    result = runner.invoke(cli, ["train", "--config", config_path, "--data", data_dir,
                                 "--out", out, "--profile", "desk"])
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, "config.txt"), "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    assert "profile=desk" in lines
    assert "d=2" in lines
    assert "lr=0.002" in lines
