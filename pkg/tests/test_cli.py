import os

import pandas as pd
import pytest

from mixer_lab import main as cli
from mixer_lab.autodiff import DegenerateVectorError
from mixer_lab.constants import HIST_COLUMNS, PROBE_COLUMNS, REPORT_COLUMNS, VERIFY_COLUMNS
from mixer_lab.errors import ConfigError
from mixer_lab.trainer import NonFiniteLossError


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture
def trained_run(tiny_run_file, tmp_path):
    """gen + train on the desk-sized config; returns (config path, output dir)."""
    out = tmp_path / "run"
    config = tiny_run_file(out_dir=out)
    assert run("gen", "--config", config, "--quiet") == cli.EXIT_OK
    assert run("train", "--config", config, "--quiet") == cli.EXIT_OK
    return config, out


def test_gen_writes_dataset_and_reports_oracle(tiny_run_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("gen", "--config", tiny_run_file(out_dir=out)) == cli.EXIT_OK
    assert (out / "dataset.csv").is_file() and (out / "dataset.json").is_file()
    printed = capsys.readouterr().out
    assert "DATASET GENERATED" in printed
    assert "Nearest-centroid oracle" in printed


def test_train_writes_checkpoint_and_history(trained_run):
    _, out = trained_run
    assert (out / "model.ckpt").is_file()
    history = pd.read_csv(out / "history.csv")
    assert history["epoch"].tolist() == [0, 1]


def test_train_resume_continues_the_history(trained_run):
    config, out = trained_run
    assert run("train", "--config", config, "--quiet", "--resume") == cli.EXIT_OK
    # epochs already done: nothing new, history unchanged
    assert pd.read_csv(out / "history.csv")["epoch"].tolist() == [0, 1]


def test_eval_writes_report_and_histograms(trained_run):
    config, out = trained_run
    assert run("eval", "--config", config, "--quiet") == cli.EXIT_OK
    report = pd.read_csv(out / "report.csv")
    assert list(report.columns) == REPORT_COLUMNS
    assert report["setting"].tolist() == ["Mix", "MixCam", "MixCamID", "MixID"]
    assert ((report["mAP"] > 0) & (report["mAP"] <= 1)).all()
    assert list(pd.read_csv(out / "dist_hist.csv").columns) == HIST_COLUMNS
    assert (out / "dist_hist_MixCamID_fused_rule.csv").is_file()


def test_cross_modal_fused_rule_equals_erased_only(trained_run):
    config, out = trained_run
    code = run("eval", "--config", config, "--quiet", "--settings", "CrossModal",
               "--embed-mode", "fused_rule,erased_only")
    assert code == cli.EXIT_OK
    report = pd.read_csv(out / "report.csv", float_precision="round_trip")
    fused, erased = report.iloc[0], report.iloc[1]
    for column in ("R1", "R5", "R10", "R20", "mAP", "mINP", "used"):
        assert fused[column] == erased[column]


def test_single_shot_eval(trained_run):
    config, out = trained_run
    code = run("eval", "--config", config, "--quiet", "--settings", "MixCamID", "--shot-mode", "single_shot",
               "--trials", "3")
    assert code == cli.EXIT_OK
    assert len(pd.read_csv(out / "report.csv")) == 1


def test_pipeline_is_reproducible(tiny_run_file, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        config = tiny_run_file(out_dir=out)
        for command in ("gen", "train", "eval"):
            assert run(command, "--config", config, "--quiet") == cli.EXIT_OK
        outputs.append(out)
    for file_name in ("dataset.csv", "history.csv", "model.ckpt", "report.csv", "dist_hist.csv"):
        assert (outputs[0] / file_name).read_bytes() == (outputs[1] / file_name).read_bytes(), file_name


def test_verify_passes_and_writes_table(tmp_path, capsys):
    out = tmp_path / "verify"
    assert run("verify", "--out", str(out), "--trials", "50", "--quiet") == cli.EXIT_OK
    table = pd.read_csv(out / "verify.csv")
    assert list(table.columns) == VERIFY_COLUMNS
    assert table["pass"].all()
    gap = table.loc[table["check"] == "theorem1_gap", "max_violation"]
    assert len(gap) == 1 and gap.iloc[0] > 0.0
    assert "VERIFICATION PASSED" in capsys.readouterr().out


def test_verify_fails_when_a_measure_is_broken(tmp_path, monkeypatch, capsys):
    from mixer_lab import miprobe

    monkeypatch.setattr(miprobe, "mutual_info", lambda t, a, b: 1.0)
    out = tmp_path / "verify"
    assert run("verify", "--out", str(out), "--trials", "5", "--quiet") == cli.EXIT_FAILURE
    assert not pd.read_csv(out / "verify.csv")["pass"].all()
    assert "Offending checks" in capsys.readouterr().out


def test_probe_writes_four_probes(trained_run, capsys):
    config, out = trained_run
    assert run("probe", "--config", config, "--quiet", "--bins", "4") == cli.EXIT_OK
    table = pd.read_csv(out / "probe.csv")
    assert list(table.columns) == PROBE_COLUMNS
    assert len(table) == 4
    assert ((table["accuracy"] >= 0) & (table["accuracy"] <= 1)).all()
    assert "Binned MI" in capsys.readouterr().out


def test_sweep_trains_and_evaluates_each_point(trained_run):
    config, out = trained_run
    assert run("train", "--config", config, "--quiet", "--sweep", "lambda_m=0,0.4") == cli.EXIT_OK
    assert (out / "sweep" / "lambda_m=0" / "model.ckpt").is_file()
    assert (out / "sweep" / "lambda_m=0.4" / "model.ckpt").is_file()

    code = run("eval", "--config", config, "--quiet", "--settings", "Mix", "--sweep-dir", str(out / "sweep"))
    assert code == cli.EXIT_OK
    table = pd.read_csv(out / "sweep_report.csv", dtype={"value": str})
    assert table["value"].tolist() == ["0", "0.4"]


def test_missing_dataset_is_a_usage_error(tiny_run_file, tmp_path, capsys):
    config = tiny_run_file(out_dir=tmp_path / "empty")
    assert run("train", "--config", config, "--quiet") == cli.EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_bad_config_is_a_usage_error(tiny_run_file, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"train": {"epochs": -1}}', encoding="utf-8")
    assert run("gen", "--config", str(path)) == cli.EXIT_USAGE
    assert run("train", "--config", tiny_run_file(), "--ablation", "nothing") == cli.EXIT_USAGE


def test_unknown_setting_is_a_usage_error(trained_run):
    config, _ = trained_run
    assert run("eval", "--config", config, "--quiet", "--settings", "Everything") == cli.EXIT_USAGE


def test_argparse_errors_exit_with_2():
    with pytest.raises(SystemExit) as info:
        run("bogus")
    assert info.value.code == 2


def test_numerical_failure_exits_with_3(trained_run, monkeypatch):
    config, _ = trained_run

    def explode(*args, **kwargs):
        raise NonFiniteLossError("total", 0, 0)

    monkeypatch.setattr(cli, "train_run", explode)
    assert run("train", "--config", config, "--quiet") == cli.EXIT_NUMERIC


@pytest.mark.parametrize("err, code", [
    (NonFiniteLossError("l_o", 1, 2), cli.EXIT_NUMERIC),
    (DegenerateVectorError("zero row"), cli.EXIT_NUMERIC),
    (ConfigError("bad"), cli.EXIT_USAGE),
    (FileNotFoundError("gone"), cli.EXIT_USAGE),
    (RuntimeError("boom"), cli.EXIT_FAILURE),
])
def test_exit_code_mapping(err, code):
    assert cli.exit_code_for(err) == code


def test_seed_flag_reaches_every_section(tiny_run_file, tmp_path):
    args = cli.build_parser().parse_args(["gen", "--config", tiny_run_file(), "--seed", "7"])
    cfg = cli._resolve_config(args)
    assert cfg.gen.seed == cfg.model.seed == cfg.train.seed == cfg.eval.seed == 7
    assert os.path.basename(cfg.out) == "run"
