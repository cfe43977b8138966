import json

import pytest

from xrayattack.cli import main
from xrayattack.physics import bundled_samples_path


def run(*argv):
    return main([str(a) for a in argv])


def test_fit_prints_table_and_is_reproducible(tmp_path, capsys):
    src = bundled_samples_path("iron")
    assert run("fit", "--samples", src, "--material", "iron", "--out", tmp_path / "a.json") == 0
    table = capsys.readouterr().out
    assert "R2" in table and "constant" in table
    assert run("fit", "--samples", src, "--material", "iron", "--out", tmp_path / "b.json") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fit_insufficient_data_exits_2(tmp_path, capsys):
    lines = bundled_samples_path("iron").read_text().splitlines()
    (tmp_path / "two.csv").write_text("\n".join(lines[:3]) + "\n")
    assert run("fit", "--samples", tmp_path / "two.csv", "--out", tmp_path / "m.json") == 2
    assert "insufficient distinct depths" in capsys.readouterr().err


def test_missing_artifact_exits_3(tmp_path, capsys):
    assert run("fit", "--samples", tmp_path / "nope.csv", "--out", tmp_path / "m.json") == 3
    assert "nope.csv" in capsys.readouterr().err
    assert run("train", "--data", tmp_path, "--out", tmp_path / "t") == 3


def test_bad_usage_exits_2():
    assert run("attack", "--baseline", "sideways") == 2


def test_config_file_defaults_and_flag_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"args": {"n_train": 3, "n_test": 2}}))
    assert run("synth", "--out", tmp_path / "d", "--mini", "--config", tmp_path / "c.json", "--n-test", 1) == 0
    summary = json.loads((tmp_path / "d" / "synth_summary.json").read_text())
    assert summary == {"canvas": 160, "n_train": 3, "n_test": 1}
    snap = json.loads((tmp_path / "d" / "config.json").read_text())
    assert snap["command"] == "synth" and snap["args"]["n_train"] == 3 and "version" in snap


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    assert run("synth", "--mini", "--n-train", 24, "--n-test", 4, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--epochs", 2, "--out", root / "train") == 0
    return root


@pytest.mark.slow
def test_mini_smoke_pipeline(mini_run, tmp_path):
    root = mini_run
    det = root / "train" / "detector.pt"
    quick = ["--iterations", 2, "--reinforce-iters", 5, "--batch-share", 2]
    assert run("attack", "--detector", det, "--data", root / "data", "--out", tmp_path / "atk", *quick) == 0
    assert run("eval", "--detector", det, "--attack", tmp_path / "atk", "--perturb", "change", "--out", tmp_path / "ev") == 0
    assert run("defend", "--method", "classifier", "--detector", det, "--data", root / "data",
               "--attack", tmp_path / "atk", "--out", tmp_path / "df") == 0
    assert run("export-stl", "--attack", tmp_path / "atk", "--out", tmp_path / "stl") == 0
    # 4 test scenes in groups of 2, 4 objects per group
    assert len(list((tmp_path / "stl").glob("*.stl"))) == 8
    summaries = [root / "data" / "synth_summary.json", root / "train" / "train_summary.json",
                 tmp_path / "atk" / "attack_summary.json", tmp_path / "ev" / "eval_summary.json",
                 tmp_path / "df" / "defend_summary.json"]
    assert all(p.exists() for p in summaries)
    assert run("report", root / "train", tmp_path / "atk", "--out", tmp_path / "r.csv") == 0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 3
    assert run("eval", "--detector", det, "--attack", tmp_path / "atk", "--out", tmp_path / "e2",
               "--assert-min-map", 101) == 4


@pytest.mark.slow
def test_vanilla_equals_unpolished_xadv_at_corners(mini_run, tmp_path):
    root = mini_run
    det = root / "train" / "detector.pt"
    args = ["--detector", det, "--data", root / "data", "--batch-share", 2]
    assert run("attack", *args, "--baseline", "vanilla", "--out", tmp_path / "v") == 0
    assert run("attack", *args, "--baseline", "xadv", "--iterations", 0, "--placement", "fix", "--out", tmp_path / "x") == 0
    assert (tmp_path / "v" / "attack_summary.json").read_text() == (tmp_path / "x" / "attack_summary.json").read_text()
