import json

import pytest

from cdguide import cli

SMALL = [
    "--set", "simulate.K=40", "--set", "simulate.n_paths=400",
    "--set", "h.optimizer.iterations=40", "--set", "h.optimizer.batch_size=128",
    "--set", "q.optimizer.iterations=40", "--set", "q.optimizer.batch_size=128",
    "--set", "sample.K=40", "--set", "sample.n_paths=200",
    "--set", "eval.n_reference=500",
]


def run(*argv):
    return cli.run(list(argv))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    assert run("all-synthetic", "--config", "synthetic_1d", "--out", str(out), *SMALL) == 0
    return out


def test_all_synthetic_writes_outputs(small_run):
    names = {p.name for p in small_run.iterdir()}
    for f in ("eval.csv", "pretrained_terminal.csv", "samples_ML_sde.csv", "samples_MCL_sde.csv",
              "h.params", "q.params", "samples_hist.png", "eval.manifest.json"):
        assert f in names
    lines = (small_run / "eval.csv").read_text().splitlines()
    assert lines[0].startswith("sample,") and len(lines) == 3


def test_manifest_hash_matches_config(small_run):
    from cdguide.config import config_hash

    for stage in ("simulate", "train-h", "train-q", "eval"):
        man = json.loads((small_run / f"{stage}.manifest.json").read_text())
        cfg = json.loads((small_run / f"{stage}.config.json").read_text())
        assert man["config_hash"] == config_hash(cfg)
        assert man["stage"] == stage


def test_byte_identical_rerun(small_run, tmp_path):
    assert run("all-synthetic", "--config", "synthetic_1d", "--out", str(tmp_path), *SMALL) == 0
    files = sorted(p.name for p in small_run.iterdir())
    assert files == sorted(p.name for p in tmp_path.iterdir())
    for f in files:
        assert (small_run / f).read_bytes() == (tmp_path / f).read_bytes(), f


def test_eta_flag_reaches_manifest(small_run, capsys):
    assert run("sample", "--config", "synthetic_1d", "--out", str(small_run), *SMALL, "--eta", "2.5", "--mode", "ML") == 0
    man = json.loads((small_run / "sample_ML_sde.manifest.json").read_text())
    assert man["eta"] == 2.5
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["eta"] == 2.5


def test_seed_changes_output(small_run, tmp_path):
    assert run("simulate", "--config", "synthetic_1d", "--out", str(tmp_path), *SMALL, "--seed", "7") == 0
    a = (small_run / "pretrained_terminal.csv").read_bytes()
    assert (tmp_path / "pretrained_terminal.csv").read_bytes() != a


def test_missing_stage_exit_code(tmp_path, capsys):
    assert run("train-q", "--config", "synthetic_1d", "--out", str(tmp_path)) == 3
    assert "simulate" in capsys.readouterr().err
    assert run("simulate", "--config", "synthetic_1d", "--out", str(tmp_path), *SMALL) == 0
    assert run("train-q", "--config", "synthetic_1d", "--out", str(tmp_path), *SMALL) == 3
    assert "train-h" in capsys.readouterr().err


def test_eval_without_samples(tmp_path):
    assert run("eval", "--config", "synthetic_1d", "--out", str(tmp_path)) == 3


def test_unknown_key_exit_code(tmp_path, capsys):
    assert run("simulate", "--out", str(tmp_path), "--set", "simulate.bogus=1") == 2
    assert "simulate.bogus" in capsys.readouterr().err


def test_bad_value_exit_code(tmp_path):
    assert run("simulate", "--out", str(tmp_path), "--set", "schedule.kind=XX") == 2


def test_missing_config_file(tmp_path):
    assert run("simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)) == 2
    assert run("simulate", "--config", "no_such_config", "--out", str(tmp_path)) == 2


def test_oracle_stage(tmp_path):
    assert run("oracle", "--config", "synthetic_1d", "--out", str(tmp_path), "--set", "oracle.n_t=11", "--set", "oracle.n_y=21") == 0
    lines = (tmp_path / "oracle_h.csv").read_text().splitlines()
    assert lines[0] == "t,y,h,dlogh_dy" and len(lines) == 1 + 11 * 21
    assert (tmp_path / "oracle_h.png").exists()


STRESS_SMALL = [
    "--set", "stress.synthetic_days=400", "--set", "stress.N=16", "--set", "stress.k=4", "--set", "stress.m=2",
    "--set", "stress.tau=-0.03", "--set", "stress.n_generated=40",
    "--set", "stress.eta_ml=[1.0]", "--set", "stress.eta_mcl=[1.0]",
    "--set", "score.optimizer.iterations=50", "--set", "score.hidden=[16]",
    "--set", "simulate.K=10", "--set", "simulate.n_paths=100", "--set", "sample.K=10",
    "--set", "h.optimizer.iterations=20", "--set", "q.optimizer.iterations=20",
    "--set", "h.hidden=[16]", "--set", "q.hidden=[16]",
]


@pytest.mark.slow
def test_stress_small_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("stress", "--config", "stress", "--out", str(a), *STRESS_SMALL) == 0
    assert run("stress", "--config", "stress", "--out", str(b), *STRESS_SMALL) == 0
    rows = (a / "stress_report.csv").read_text().splitlines()
    assert rows[0] == "rule,source,eta,mean,std,q05,q10,n"
    assert len(rows) == 1 + 3 * 3
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
