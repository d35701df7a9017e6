import pytest
from typer.testing import CliRunner

from helpers import TINY_CONFIG_TEXT
from main import EXIT_DIVERGED, EXIT_GRADCHECK_FAILED, EXIT_IO, EXIT_MANIFEST_MISMATCH, EXIT_USAGE, app
from trainer import TrainingDivergedError

runner = CliRunner()


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TINY_CONFIG_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def data_dir(tmp_path, config_path):
    out = tmp_path / "data"
    result = runner.invoke(app, ["--config", str(config_path), "--out", str(out), "gen"])
    assert result.exit_code == 0, result.output
    return out


def test_gen_is_deterministic(tmp_path, config_path, data_dir):
    other = tmp_path / "again"
    result = runner.invoke(app, ["--config", str(config_path), "--out", str(other), "--jobs", "2", "gen"])
    assert result.exit_code == 0, result.output
    for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
        assert (other / name).read_bytes() == (data_dir / name).read_bytes()
    assert len((data_dir / "train.jsonl").read_text().splitlines()) == 4


def test_gen_rejects_unknown_config_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nwidth = 4\n", encoding="utf-8")
    result = runner.invoke(app, ["--config", str(path), "--out", str(tmp_path / "x"), "gen"])
    assert result.exit_code == EXIT_USAGE
    assert "model.width" in result.output


def test_missing_config_file_is_an_io_error(tmp_path):
    result = runner.invoke(app, ["--config", str(tmp_path / "missing.ini"), "gen"])
    assert result.exit_code == EXIT_IO


def test_stats_on_data_dir(data_dir):
    result = runner.invoke(app, ["stats", str(data_dir)])
    assert result.exit_code == 0, result.output
    assert '"n_graphs": 8' in result.output


def test_train_writes_report(tmp_path, config_path, data_dir):
    out = tmp_path / "run"
    result = runner.invoke(app, ["--config", str(config_path), "--out", str(out), "train", str(data_dir)])
    assert result.exit_code == 0, result.output
    assert "run seed0 (fl=1, seed=0)" in result.output
    for name in ("report.json", "report.txt", "metrics.csv", "predictions.csv", "checkpoint.bin"):
        assert (out / name).exists()


def test_train_rejects_manifest_mismatch(config_path, data_dir):
    result = runner.invoke(app, ["--config", str(config_path), "--seed", "5", "train", str(data_dir)])
    assert result.exit_code == EXIT_MANIFEST_MISMATCH


def test_train_missing_data_dir(tmp_path, config_path):
    result = runner.invoke(app, ["--config", str(config_path), "train", str(tmp_path / "nowhere")])
    assert result.exit_code == EXIT_IO


def test_train_divergence_exit_code(config_path, data_dir, mocker):
    mocker.patch("main.train", side_effect=TrainingDivergedError(1, 1, float("nan")))
    result = runner.invoke(app, ["--config", str(config_path), "train", str(data_dir)])
    assert result.exit_code == EXIT_DIVERGED


def test_ablate_writes_table(tmp_path, config_path, data_dir):
    out = tmp_path / "ablation"
    result = runner.invoke(
        app, ["--config", str(config_path), "--out", str(out), "ablate", str(data_dir), "--fl", "vanilla,1", "--seeds", "0"]
    )
    assert result.exit_code == 0, result.output
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "label,fl,mean,std,n_seeds"
    assert [line.split(",")[0] for line in lines[1:]] == ["vanilla", "fl=1"]


def test_ablate_rejects_bad_fl_list(config_path, data_dir):
    result = runner.invoke(app, ["--config", str(config_path), "ablate", str(data_dir), "--fl", "one"])
    assert result.exit_code == EXIT_USAGE


def test_gradcheck_single_repeat():
    result = runner.invoke(app, ["gradcheck", "--repeats", "1"])
    assert result.exit_code == 0, result.output
    assert "all checks passed" in result.output


def test_maskdump_prints_rows_and_ego_nets(tmp_path):
    path = tmp_path / "chain.jsonl"
    path.write_text('{"num_nodes":4,"edges":[[0,1],[1,2],[2,3]],"node_feats":[0,0,0,0]}\n', encoding="utf-8")
    png = tmp_path / "mask.png"
    result = runner.invoke(app, ["maskdump", str(path), "0", "--fl", "1", "--png", str(png)])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    assert lines[:4] == ["1 1 0 0", "1 1 1 0", "0 1 1 1", "0 0 1 1"]
    assert "node 1: ego-net size 3: 0 1 2" in lines
    assert png.exists()


def test_maskdump_rejects_bad_index(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text('{"num_nodes":1,"edges":[],"node_feats":[0]}\n', encoding="utf-8")
    assert runner.invoke(app, ["maskdump", str(path), "3"]).exit_code == EXIT_USAGE
    assert runner.invoke(app, ["maskdump", str(path), "0", "--fl", "-1"]).exit_code == EXIT_USAGE


def test_gen_single_train_graph(tmp_path):
    path = tmp_path / "one.ini"
    path.write_text(TINY_CONFIG_TEXT.replace("n_train = 4", "n_train = 1"), encoding="utf-8")
    out = tmp_path / "data"
    assert runner.invoke(app, ["--config", str(path), "--out", str(out), "gen"]).exit_code == 0
    assert len((out / "train.jsonl").read_text().splitlines()) == 1


def test_gradcheck_fails_on_corrupted_backward(mocker):
    mocker.patch("autodiff._relu_grad", side_effect=lambda x, g: 2.0 * g * (x > 0))
    result = runner.invoke(app, ["gradcheck", "--repeats", "1"])
    assert result.exit_code == EXIT_GRADCHECK_FAILED
    assert "FAIL" in result.output


def test_maskdump_fl_zero_is_identity(tmp_path):
    path = tmp_path / "chain.jsonl"
    path.write_text('{"num_nodes":3,"edges":[[0,1],[1,2]],"node_feats":[0,0,0]}\n', encoding="utf-8")
    result = runner.invoke(app, ["maskdump", str(path), "0", "--fl", "0"])
    assert result.output.splitlines()[:3] == ["1 0 0", "0 1 0", "0 0 1"]


def test_train_rerun_writes_identical_files(tmp_path, config_path, data_dir):
    first, second = tmp_path / "first", tmp_path / "second"
    for out, jobs in ((first, "1"), (second, "2")):
        result = runner.invoke(
            app, ["--config", str(config_path), "--out", str(out), "--jobs", jobs, "train", str(data_dir)]
        )
        assert result.exit_code == 0, result.output
    for name in ("report.json", "report.txt", "metrics.csv", "predictions.csv", "checkpoint.bin"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_ablate_rerun_writes_identical_files(tmp_path, config_path, data_dir):
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        result = runner.invoke(app, ["--config", str(config_path), "--out", str(out), "ablate", str(data_dir)])
        assert result.exit_code == 0, result.output
    for name in ("ablation.csv", "runs.csv", "ablation.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_gen_exhausted_redraws_is_a_usage_error(tmp_path):
    path = tmp_path / "empty.ini"
    sparse = "connected_only = true\nmax_attempts = 2\np = 0.0\nq = 0.0\np_p = 0.0\nq_p = 0.0"
    path.write_text(TINY_CONFIG_TEXT.replace("connected_only = false", sparse), encoding="utf-8")
    result = runner.invoke(app, ["--config", str(path), "--out", str(tmp_path / "data"), "gen"])
    assert result.exit_code == EXIT_USAGE
    assert "2 attempts" in result.output


def test_train_corrupt_manifest_exit_code(config_path, data_dir):
    (data_dir / "manifest.json").write_text("{not json", encoding="utf-8")
    result = runner.invoke(app, ["--config", str(config_path), "train", str(data_dir)])
    assert result.exit_code == EXIT_MANIFEST_MISMATCH
    assert "not a valid dataset manifest" in result.output
