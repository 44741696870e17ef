import os
import subprocess
import sys

import pytest

from uqbed.cli import CommandSpec, UsageError, main, parse_invocation
from uqbed.dataforge import read_partition
from uqbed.pipeline import load_config, read_eval, read_records

TINY = ["dataset.classes=4", "dataset.per_class=30", "dataset.test_per_class=10", "dataset.dim=4",
        "dataset.separation=6.0", "epochs=2", "batch_size=32", "measures=['largest','entropy']"]


def sets(*extra):
    out = []
    for kv in (*TINY, *extra):
        out += ["--set", kv]
    return out


@pytest.fixture
def config(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("schema_version = 1\ntrials = 5\ndata_seeds = 1\n")
    return str(f)


def test_parse_partition():
    spec = parse_invocation(["partition", "--config", "c", "--out", "d"])
    assert spec == CommandSpec("partition", "c", [], "d", 0)


def test_parse_overrides_and_verbosity():
    spec = parse_invocation(["sweep", "-vv", "--config", "c", "--out", "d", "--set", "trials=1",
                             "--format", "csv"])
    assert spec.overrides == ["trials=1"] and spec.verbosity == 2 and spec.formats == ["csv"]


def test_unknown_flag_exits_2(capsys):
    assert main(["partition", "--config", "c", "--out", "d", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_2():
    assert main(["frobnicate"]) == 2


def test_missing_config_exits_2(tmp_path, capsys):
    with pytest.raises(UsageError):
        parse_invocation(["sweep", "--out", str(tmp_path)])
    assert main(["sweep", "--out", str(tmp_path)]) == 2
    assert "--config" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("algorithms = ['nope']\n")
    assert main(["partition", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    assert main(["partition", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "o")]) == 2


def test_override_precedence(config):
    assert load_config(config).trials == 5
    spec = parse_invocation(["sweep", "--config", config, "--out", "d", "--set", "trials=1"])
    assert load_config(spec.config, spec.overrides).trials == 1


def test_partition_command(tmp_path, config):
    out = tmp_path / "o"
    assert main(["partition", "--config", config, "--out", str(out), *sets()]) == 0
    p = read_partition(out / "partition.txt")
    assert len(p.in_classes) == len(p.out_classes) == 2


def test_report_on_empty_dir_exits_2(tmp_path, caplog):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "no evaluation results" in caplog.text
    (tmp_path / "eval.jsonl").write_text("")
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_evaluate_without_runs_exits_2(tmp_path, config):
    assert main(["evaluate", "--config", config, "--out", str(tmp_path / "o"), *sets()]) == 2


def test_train_single_run(tmp_path, config):
    out = tmp_path / "o"
    code = main(["train", "--config", config, "--out", str(out), "--algorithm", "oc", "--trial", "2",
                 "--data-seed", "1", *sets()])
    assert code == 0
    (rec,) = read_records(out)
    assert (rec.algorithm, rec.trial, rec.data_seed, rec.status) == ("oc", 2, 1, "done")


def test_sweep_then_report(tmp_path, config):
    out = tmp_path / "o"
    assert main(["sweep", "--config", config, "--out", str(out), *sets("trials=2")]) == 0
    assert len(read_records(out)) == 2
    names = {p.name for p in out.iterdir()}
    for ext in ("txt", "csv", "tex"):
        assert {f"report_in_domain.{ext}", f"report_out_domain.{ext}"} <= names
    before = (out / "report_out_domain.tex").read_bytes()
    (out / "report_out_domain.tex").unlink()
    assert main(["report", "--out", str(out), "--format", "latex"]) == 0
    assert (out / "report_out_domain.tex").read_bytes() == before
    assert main(["evaluate", "--config", config, "--out", str(out), *sets("trials=2")]) == 0
    assert read_eval(out).records


def test_partial_failure_exits_1(tmp_path, config, monkeypatch):
    from uqbed import pipeline

    calls = {"n": 0}
    real = pipeline.train_run

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("diverged")
        return real(*a, **k)

    monkeypatch.setattr(pipeline, "train_run", flaky)
    out = tmp_path / "o"
    assert main(["sweep", "--config", config, "--out", str(out), *sets("trials=2")]) == 1
    assert "1 failed run" in (out / "report_in_domain.txt").read_text()
    assert main(["report", "--out", str(out)]) == 1


def test_writes_only_under_out(tmp_path, config):
    work = tmp_path / "work"
    work.mkdir()
    cwd = os.getcwd()
    os.chdir(work)
    try:
        assert main(["sweep", "--config", config, "--out", "o", *sets("trials=1")]) == 0
    finally:
        os.chdir(cwd)
    assert [p.name for p in work.iterdir()] == ["o"]


def test_selftest_command():
    assert main(["selftest"]) == 0


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "uqbed.cli", "report", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2 and r.stdout == ""
    assert "no evaluation results" in r.stderr
