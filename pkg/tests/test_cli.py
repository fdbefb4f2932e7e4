from pathlib import Path

import pytest

import cli
from services.experiment_config import config_from_dict, dump_config
from services.experiments import RunResult, experiment_runner


@pytest.fixture
def config_file(tmp_path, experiment_dict):
    path = tmp_path / "small.toml"
    path.write_text(dump_config(config_from_dict(experiment_dict)))
    return path


def test_successful_run_prints_the_report_path(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.run(["validate-clt", "--config", str(config_file), "-R", "2", "--n-grid", "8", "--out", str(out)])
    assert code == cli.EXIT_OK
    assert capsys.readouterr().out.strip() == str(out / "report.json")
    assert (out / "report.json").exists()


def test_invalid_config_exits_with_two(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[space]\nvariant = "L3"\n')
    assert cli.run(["simulate", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.run(["simulate", "--config", str(tmp_path / "missing.toml")]) == cli.EXIT_CONFIG


def test_lab_errors_exit_with_one(config_file, tmp_path):
    orphan = tmp_path / "orphan.csv"
    orphan.write_text("0,0\n")
    assert cli.run(["estimate", "--config", str(config_file), "--input", str(orphan)]) == cli.EXIT_FAILURE
    assert cli.run(["counterexample", "rv-clt", "--control"]) == cli.EXIT_FAILURE


def test_failed_acceptance_exits_with_three(config_file, monkeypatch, tmp_path):
    def failing(command, cfg, **kwargs):
        return RunResult(command, {"checks": {"sarcv_slope": False}}, tmp_path, passed=False)

    monkeypatch.setattr(experiment_runner, "run", failing)
    assert cli.run(["validate-lln", "--config", str(config_file)]) == cli.EXIT_ACCEPTANCE


def test_estimate_reads_a_simulated_path(config_file, tmp_path, capsys):
    sim = tmp_path / "sim"
    assert cli.run(["simulate", "--config", str(config_file), "--out", str(sim)]) == cli.EXIT_OK
    capsys.readouterr()
    est = tmp_path / "est"
    code = cli.run(["estimate", "--config", str(config_file), "--input", str(sim / "path.csv"), "--out", str(est)])
    assert code == cli.EXIT_OK
    assert Path(capsys.readouterr().out.strip()).parent == est
    assert (est / "sarcv.csv").exists()


def test_n_grid_argument_parsing():
    assert cli._n_grid("64, 128,256") == [64, 128, 256]
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["validate-lln", "--config", "x.toml", "--n-grid", "a,b"])
