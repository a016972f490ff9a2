import json

import pytest

from scanmerge.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, build_parser, load_config, main, parse_value
from scanmerge.pipeline import RunLayout, read_summary

from test_pipeline import SMALL


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_parse_value():
    assert parse_value("0.3") == 0.3
    assert parse_value("7") == 7
    assert parse_value("true") is True
    assert parse_value("[2, 6]") == [2, 6]
    assert parse_value("auto") == "auto"
    assert parse_value("null") is None


def test_flags_map_to_config(small_cfg):
    args = build_parser().parse_args(
        ["run", "-c", str(small_cfg), "--t-c", "0.3", "--omega", "2.5", "--samples", "50",
         "--set", "eval.tau=0.02", "--seed", "4"])
    cfg = load_config(args)
    assert cfg.get("planner.t_c") == 0.3
    assert cfg.get("merge.omega") == 2.5
    assert cfg.get("register.n_samples") == 50
    assert cfg.get("eval.tau") == 0.02
    assert cfg.get("seed") == 4
    assert cfg.get("scene.n_points") == SMALL["scene"]["n_points"]


def test_stage_flags_are_scoped():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["plan", "--omega", "1"])


def test_config_errors(tmp_path, capsys):
    assert main(["plan", "-o", str(tmp_path), "--t-c", "1.5"]) == EXIT_CONFIG
    assert "t_c" in capsys.readouterr().err
    assert main(["plan", "-o", str(tmp_path), "--set", "planner.bogus=1"]) == EXIT_CONFIG
    assert main(["plan", "-o", str(tmp_path), "--set", "novalue"]) == EXIT_CONFIG
    assert main(["plan", "-o", str(tmp_path), "-c", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_missing_stage_input(tmp_path, small_cfg, capsys):
    assert main(["merge", "-c", str(small_cfg), "-o", str(tmp_path)]) == EXIT_STAGE
    assert "simulate" in capsys.readouterr().err


def test_stagewise_then_run(tmp_path, small_cfg, capsys):
    out = str(tmp_path)
    for st in ("simulate", "plan"):
        assert main([st, "-c", str(small_cfg), "-o", out]) == EXIT_OK
    capsys.readouterr()
    assert main(["run", "-c", str(small_cfg), "-o", out]) == EXIT_OK
    text = capsys.readouterr().out
    metrics = json.loads(text[text.index("{"):])
    assert metrics["fscore"] > metrics["image_only_fscore"]
    args = build_parser().parse_args(["run", "-c", str(small_cfg), "-o", out])
    recs = read_summary(RunLayout(load_config(args), tmp_path).run_dir)
    assert [r["stage"] for r in recs[1:]][-1] == "eval"


def test_sweep_command(tmp_path, small_cfg, capsys):
    csv_path = tmp_path / "t.csv"
    rc = main(["sweep", "planner.t_c", "3", "-c", str(small_cfg), "-o", str(tmp_path),
               "--csv", str(csv_path)])
    assert rc == EXIT_OK
    assert "1 runs, 1 failed" in capsys.readouterr().out
    assert "failed" in csv_path.read_text()
