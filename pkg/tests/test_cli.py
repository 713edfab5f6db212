"""Command-line behavior: config handling, run artifacts, determinism."""

import configparser
import glob
import os

import numpy as np
import pytest

import cvflow.constraints as cn
import cvflow.flow as fl
import cvflow.flow_train as ft
import cvflow.metrics as mx
from cvflow.cli import ConfigError, RunConfig, main
from cvflow.seeding import derived_rng


@pytest.fixture(scope="module")
def tiny_flow_ckpt(tmp_path_factory):
    """A barely-trained uniform-base R+L2 flow checkpoint for CLI plumbing."""
    out = tmp_path_factory.mktemp("tinyflow")
    cfg = ft.FlowTrainConfig(epochs=2, batch=64, constraint="R+L2",
                             base="uniform", seed=11)
    res = ft.pretrain(cfg, outdir=str(out))
    return res.checkpoint_path


def run_cli(argv, capsys, env_dir=None, monkeypatch=None):
    if env_dir is not None:
        monkeypatch.setenv("CVFLOW_OUTDIR", str(env_dir))
    rc = main(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def test_unknown_subcommand_fails_with_usage(capsys):
    rc, _, err = run_cli(["frobnicate"], capsys)
    assert rc != 0
    assert "usage" in err.lower()


def test_missing_required_argument_is_an_error(capsys):
    rc, _, err = run_cli(["train-flow"], capsys)
    assert rc == 1
    assert "constraint" in err


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[flow-train]\nepochs = 5\nwarp-speed = 9\n")
    with pytest.raises(ConfigError, match="warp-speed"):
        RunConfig.load(str(path))


def test_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[plasma]\nx = 1\n")
    with pytest.raises(ConfigError, match="plasma"):
        RunConfig.load(str(path))


def test_config_error_surfaces_through_main(tmp_path, capsys, monkeypatch):
    path = tmp_path / "bad.ini"
    path.write_text("[global]\nturbo = yes\n")
    rc, _, err = run_cli(
        ["train-flow", "--constraint", "R+L2", "--config", str(path)],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 1
    assert "turbo" in err


def test_train_flow_writes_run_artifacts(tmp_path, capsys, monkeypatch):
    rc, out, _ = run_cli(
        ["train-flow", "--constraint", "box(2)", "--epochs", "3",
         "--batch", "32", "--seed", "4"],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 0
    (run_dir,) = glob.glob(str(tmp_path / "train-flow-*"))
    for name in ("config.resolved", "flowlog.csv", "flow.json"):
        assert os.path.exists(os.path.join(run_dir, name))
    assert run_dir in out
    log_lines = open(os.path.join(run_dir, "flowlog.csv")).read().splitlines()
    assert log_lines[0] == "epoch,loss,accuracy"
    assert len(log_lines) == 4


def test_cli_flag_overrides_config_file(tmp_path, capsys, monkeypatch):
    ini = tmp_path / "run.ini"
    ini.write_text("[global]\nseed = 9\n[flow-train]\nepochs = 7\nbatch = 16\n")
    rc, _, _ = run_cli(
        ["train-flow", "--constraint", "box(1)", "--config", str(ini),
         "--epochs", "2"],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 0
    (run_dir,) = glob.glob(str(tmp_path / "train-flow-*"))
    parser = configparser.ConfigParser()
    parser.read(os.path.join(run_dir, "config.resolved"))
    # flag beats file, file beats default
    assert parser.get("flow-train", "epochs") == "2"
    assert parser.get("flow-train", "batch") == "16"
    assert parser.get("global", "seed") == "9"


def test_same_seed_reruns_are_byte_identical(tmp_path, capsys, monkeypatch):
    logs = []
    for sub in ("a", "b"):
        argv = ["train-flow", "--constraint", "R+L2", "--epochs", "4",
                "--batch", "64", "--seed", "12"]
        rc, _, _ = run_cli(argv, capsys, env_dir=tmp_path / sub,
                           monkeypatch=monkeypatch)
        assert rc == 0
        (run_dir,) = glob.glob(str(tmp_path / sub / "train-flow-*"))
        logs.append(open(os.path.join(run_dir, "flowlog.csv"), "rb").read())
    assert logs[0] == logs[1]


def test_sample_row_count_and_summary(tiny_flow_ckpt, capsys):
    rc, out, _ = run_cli(
        ["sample", "--flow", tiny_flow_ckpt, "--constraint", "R+L2",
         "--n", "5", "--seed", "2"],
        capsys)
    assert rc == 0
    lines = out.strip().splitlines()
    assert lines[0] == "z1,z2,a1,a2,cv"
    assert len(lines) == 7  # header + 5 rows + summary
    assert lines[-1].startswith("# accuracy=")
    for line in lines[1:-1]:
        cells = [float(c) for c in line.split(",")]
        assert len(cells) == 5
        assert cells[-1] >= 0.0


def test_sample_zero_rows_prints_summary_only(tiny_flow_ckpt, capsys):
    rc, out, _ = run_cli(
        ["sample", "--flow", tiny_flow_ckpt, "--constraint", "R+L2",
         "--n", "0"],
        capsys)
    assert rc == 0
    lines = out.strip().splitlines()
    assert len(lines) == 2
    assert lines[-1] == "# accuracy=nan n=0"


def test_sample_accuracy_matches_row_fraction(tiny_flow_ckpt, capsys):
    rc, out, _ = run_cli(
        ["sample", "--flow", tiny_flow_ckpt, "--constraint", "R+L2",
         "--n", "40", "--seed", "6"],
        capsys)
    assert rc == 0
    lines = out.strip().splitlines()
    rows = [line.split(",") for line in lines[1:-1]]
    feasible = sum(1 for r in rows if float(r[-1]) == 0.0)
    reported = float(lines[-1].split("accuracy=")[1].split()[0])
    assert reported == feasible / 40


def test_sample_summary_agrees_with_direct_accuracy(tiny_flow_ckpt, capsys):
    rc, out, _ = run_cli(
        ["sample", "--flow", tiny_flow_ckpt, "--constraint", "R+L2",
         "--n", "400", "--seed", "3"],
        capsys)
    assert rc == 0
    reported = float(out.strip().splitlines()[-1].split("accuracy=")[1].split()[0])
    flow = fl.load_checkpoint(tiny_flow_ckpt)
    direct = mx.accuracy(flow, cn.catalog_lookup("R+L2"), 20_000,
                         derived_rng(0, "xcheck"))
    # same flow, independent draws: agreement up to Monte-Carlo noise
    assert abs(reported - direct) < 0.05


def test_eval_flow_report_matches_library_call(tiny_flow_ckpt, tmp_path,
                                               capsys, monkeypatch):
    rc, out, _ = run_cli(
        ["eval-flow", "--flow", tiny_flow_ckpt, "--constraint", "R+L2",
         "--n", "3000", "--seed", "9"],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 0
    (run_dir,) = glob.glob(str(tmp_path / "eval-flow-*"))
    lines = open(os.path.join(run_dir, "flow_report.csv")).read().splitlines()
    assert lines[0] == "accuracy,recall_uniform_only,f1,n_samples,constraint,n_states"
    cells = lines[1].split(",")

    flow = fl.load_checkpoint(tiny_flow_ckpt)
    cs = cn.catalog_lookup("R+L2")
    rep = mx.flow_quality_report(flow, cs, derived_rng(9, "eval-flow"), n=3000)
    assert float(cells[0]) == rep.accuracy
    assert float(cells[1]) == rep.recall
    assert float(cells[2]) == rep.f1
    assert cells[3] == "3000"


def test_report_aggregates_run_directories(tmp_path, capsys):
    for i, (env_id, algo, ret) in enumerate([
            ("ball1d", "sac-cvflow", -3.25), ("pointmass2d", "sac-proj", 1.5)]):
        d = tmp_path / f"run{i}"
        d.mkdir()
        (d / "runlog.csv").write_text(
            "step,eval_return,cv_count_pct,cv_magnitude,projections_fired\n"
            f"50,0.0,4.0,0.1,2\n100,{ret},2.0,0.05,3\n")
        (d / "config.resolved").write_text(
            f"[global]\nenv = {env_id}\n\n[agent-train]\nalgo = {algo}\n")
    (tmp_path / "not-a-run").mkdir()  # no runlog, skipped
    (tmp_path / "loose-file.txt").write_text("x")

    rc, out, _ = run_cli(["report", "--runs", str(tmp_path)], capsys)
    assert rc == 0
    lines = open(tmp_path / "report.csv").read().splitlines()
    assert lines[0] == "run_id,env,algo,final_return,cv_count_pct,cv_magnitude"
    assert lines[1] == "run0,ball1d,sac-cvflow,-3.25,2.0,0.05"
    assert lines[2] == "run1,pointmass2d,sac-proj,1.5,2.0,0.05"


def test_report_with_no_runs_is_an_error(tmp_path, capsys):
    rc, _, err = run_cli(["report", "--runs", str(tmp_path)], capsys)
    assert rc == 1
    assert "no run directories" in err


def test_train_agent_requires_flow_for_flow_algos(tmp_path, capsys,
                                                  monkeypatch):
    rc, _, err = run_cli(
        ["train-agent", "--algo", "ddpg-cvflow", "--env", "pointmass2d",
         "--constraint", "R+L2", "--steps", "10"],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 1
    assert "--flow" in err


def test_train_agent_smoke_writes_runlog(tiny_flow_ckpt, tmp_path, capsys,
                                         monkeypatch):
    rc, out, _ = run_cli(
        ["train-agent", "--algo", "sac-cvflow", "--env", "pointmass2d",
         "--constraint", "R+L2", "--flow", tiny_flow_ckpt,
         "--steps", "90", "--learning-starts", "40", "--eval-every", "45",
         "--seed", "8"],
        capsys, env_dir=tmp_path, monkeypatch=monkeypatch)
    assert rc == 0
    (run_dir,) = glob.glob(str(tmp_path / "train-agent-*"))
    lines = open(os.path.join(run_dir, "runlog.csv")).read().splitlines()
    assert lines[0] == "step,eval_return,cv_count_pct,cv_magnitude,projections_fired"
    assert [int(r.split(",")[0]) for r in lines[1:]] == [45, 90]
    assert os.path.exists(os.path.join(run_dir, "agent.json"))
    parser = configparser.ConfigParser()
    parser.read(os.path.join(run_dir, "config.resolved"))
    assert parser.get("agent-train", "algo") == "sac-cvflow"
    assert parser.get("global", "env") == "pointmass2d"


def test_output_dir_flag_beats_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CVFLOW_OUTDIR", str(tmp_path / "env-root"))
    flag_root = tmp_path / "flag-root"
    rc, _, _ = run_cli(
        ["train-flow", "--constraint", "box(1)", "--epochs", "2",
         "--batch", "16", "--output-dir", str(flag_root)],
        capsys)
    assert rc == 0
    assert glob.glob(str(flag_root / "train-flow-*"))
    assert not glob.glob(str(tmp_path / "env-root" / "*"))
