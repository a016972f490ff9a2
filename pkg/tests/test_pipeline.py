import csv
import json

import numpy as np
import pytest

from scanmerge import io
from scanmerge.pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    RunLayout,
    StageError,
    is_config_key,
    read_summary,
    run_pipeline,
    run_stage,
    summary_metrics,
    sweep,
)

# small enough to run the whole chain in a few seconds
SMALL = {
    "scene": {"length": 6.0, "width": 4.0, "height": 3.0, "n_points": 1200, "grid_spacing": 2.5},
    "sfm": {"gt_samples": 20000, "max_iters": 20},
    "planner": {"n_rays": 300},
    "scan": {"angular_resolution": 0.02},
    "synth": {"cube_resolution": 128, "write_images": False, "max_ground_pairs": 80,
              "n_aerial_views": 2},
    "merge": {"max_iters": 15},
}


def small_config(**over) -> PipelineConfig:
    d = json.loads(json.dumps(SMALL))
    for key, val in over.items():
        sec, _, name = key.partition("__")
        if name:
            d.setdefault(sec, {})[name] = val
        else:
            d[sec] = val
    return PipelineConfig(d)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = small_config()
    return cfg, root, run_pipeline(cfg, root)


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert c.get("planner.n_rays") == 1000
        assert c.get("planner.r_f") == 0.1
        assert c.get("register.n_samples") == 100
        assert c.get("register.dist_thresh") == 0.1
        assert c.get("eval.tau") == 0.01
        assert c.get("merge.omega") == "auto"

    @pytest.mark.parametrize("data", [
        {"planner": {"t_c": 0}},
        {"planner": {"t_c": 1.5}},
        {"planner": {"denominator": "other"}},
        {"planner": {"n_rays": 0}},
        {"synth": {"matcher": "sift"}},
        {"synth": {"mismatch_fraction": 0.95}},
        {"register": {"dist_thresh": -1}},
        {"merge": {"omega": "sometimes"}},
        {"merge": {"linear_solver": "qr"}},
        {"merge": {"laser_sigma": 0}},
        {"scene": {"length": -3}},
        {"scene": {"colour": 1}},
        {"seed": -1},
        {"unknown": 1},
        {"planner": {"tc": 0.5}},
        {"planner": {"r_f": "wide"}},
        {"simulate": False},
        {"sfm": {"max_track_angle_deg": 0}},
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            PipelineConfig(data)

    def test_relative_paths(self, tmp_path):
        (tmp_path / "cfg.yaml").write_text("simulate: true\ninputs:\n  mesh: data/m.ply\n")
        c = PipelineConfig.from_file(tmp_path / "cfg.yaml")
        assert c.get("inputs.mesh") == str(tmp_path / "data" / "m.ply")

    def test_json_and_yaml_agree(self, tmp_path):
        (tmp_path / "a.json").write_text(json.dumps({"planner": {"t_c": 0.25}, "seed": 3}))
        (tmp_path / "a.yaml").write_text("planner:\n  t_c: 0.25\nseed: 3\n")
        a = PipelineConfig.from_file(tmp_path / "a.json")
        b = PipelineConfig.from_file(tmp_path / "a.yaml")
        assert a.run_hash() == b.run_hash()

    def test_unparsable(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("planner: [1, 2\n")
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(tmp_path / "bad.yaml")
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(tmp_path / "missing.yaml")

    def test_with_value(self):
        c = PipelineConfig().with_value("planner.t_c", 0.25)
        assert c.get("planner.t_c") == 0.25
        assert PipelineConfig().get("planner.t_c") == 0.5
        with pytest.raises(ConfigError):
            PipelineConfig().with_value("planner.nope", 1)

    def test_config_keys(self):
        assert is_config_key("merge.rc_exponent")
        assert is_config_key("scene.length")
        assert not is_config_key("scene.seed")
        assert not is_config_key("merge")
        assert not is_config_key("merge.rc_exponent.x")

    def test_stage_keys_are_prefix_hashes(self):
        a = PipelineConfig()
        b = a.with_value("merge.rc_exponent", 1.0)
        for st in ("simulate", "plan", "synth", "register"):
            assert a.stage_key(st) == b.stage_key(st)
        assert a.stage_key("merge") != b.stage_key("merge")
        assert a.stage_key("eval") != b.stage_key("eval")
        c = a.with_value("seed", 1)
        assert all(a.stage_key(st) != c.stage_key(st) for st in STAGES)

    def test_stage_rngs_independent(self):
        c = PipelineConfig()
        assert c.rng("plan").random() != c.rng("synth").random()
        assert c.rng("plan").random() == PipelineConfig().rng("plan").random()


class TestRun:
    def test_summary(self, small_run):
        cfg, root, run_dir = small_run
        recs = read_summary(run_dir)
        assert recs[0]["record"] == "config"
        assert recs[0]["config"] == json.loads(json.dumps(cfg.to_dict()))
        assert [r["stage"] for r in recs[1:]] == list(STAGES)
        reps = {r["stage"]: r["report"] for r in recs[1:]}
        assert {"selected", "coverage_trace", "scores"} <= set(reps["plan"])
        assert all("n_inliers" in s for s in reps["register"]["scans"])
        assert {"iterations", "final_cost", "omega", "convergence"} <= set(reps["merge"])
        assert {"precision", "recall", "fscore"} <= set(reps["eval"]["merged"])

    def test_artifacts(self, small_run):
        cfg, root, _ = small_run
        lay = RunLayout(cfg, root)
        sim = lay.stage_dir("simulate")
        for f in ("mesh.ply", "candidates.json", "cameras.json", "points.ply", "tracks.csv",
                  "truth/gt.ply", "truth/cameras.json"):
            assert (sim / f).exists(), f
        syn = lay.stage_dir("synth")
        n_scans = io.read_json(lay.stage_dir("plan") / "plan.json")["n_selected"]
        assert len(list((syn / "scans").glob("scan_*.ply"))) == n_scans
        assert (syn / "pairs.csv").exists() and (syn / "references.csv").exists()
        assert len(io.read_transforms_json(lay.stage_dir("register") / "transforms.json")) == n_scans
        for f in ("cameras.json", "points.ply", "transforms.json", "solve.json"):
            assert (lay.stage_dir("merge") / f).exists()

    def test_metrics(self, small_run):
        _, _, run_dir = small_run
        m = summary_metrics(run_dir)
        assert 0 < m["fine_rms"] < 0.1 and 0 < m["coarse_rms"] < 0.1
        assert m["fscore"] > m["image_only_fscore"]

    def test_auto_omega_balances(self, small_run):
        _, _, run_dir = small_run
        rep = {r["stage"]: r["report"] for r in read_summary(run_dir)[1:]}
        assert rep["merge"]["lg_rc_initial"] == pytest.approx(0.0, abs=1e-12)

    def test_rerun_reuses_stages(self, small_run):
        cfg, root, run_dir = small_run
        lay = RunLayout(cfg, root)
        stamp = {st: (lay.stage_dir(st) / "report.json").stat().st_mtime_ns for st in STAGES}
        run_pipeline(cfg, root)
        assert stamp == {st: (lay.stage_dir(st) / "report.json").stat().st_mtime_ns
                         for st in STAGES}

    def test_later_change_reuses_earlier_stages(self, small_run):
        cfg, root, _ = small_run
        c2 = cfg.with_value("merge.rc_exponent", 1.0)
        lay1, lay2 = RunLayout(cfg, root), RunLayout(c2, root)
        run_stage(c2, "merge", root)
        assert lay2.stage_dir("register") == lay1.stage_dir("register")
        assert lay2.stage_dir("merge") != lay1.stage_dir("merge")
        assert lay2.run_dir != lay1.run_dir

    def test_deterministic(self, small_run, tmp_path):
        cfg, root, run_dir = small_run
        other = run_pipeline(cfg, tmp_path)
        assert (other / "summary.jsonl").read_text() == (run_dir / "summary.jsonl").read_text()

    def test_missing_upstream(self, tmp_path):
        with pytest.raises(StageError) as e:
            run_stage(small_config(), "register", tmp_path)
        assert e.value.stage == "simulate"


class TestOracleMatcher:
    def test_runs(self, tmp_path):
        cfg = small_config(synth__matcher="oracle")
        run_dir = run_pipeline(cfg, tmp_path)
        m = summary_metrics(run_dir)
        assert m["fscore"] > m["image_only_fscore"]


class TestRealInputs:
    def test_ingest_round_trip(self, small_run, tmp_path):
        """Files written by a simulated run can drive a run with simulate off."""
        cfg, root, _ = small_run
        lay = RunLayout(cfg, root)
        sim, syn = lay.stage_dir("simulate"), lay.stage_dir("synth")
        scans = sorted(str(p) for p in (syn / "scans").glob("scan_*.ply"))
        inputs = {"mesh": str(sim / "mesh.ply"), "candidates": str(sim / "candidates.json"),
                  "cameras": str(sim / "cameras.json"), "points": str(sim / "points.ply"),
                  "tracks": str(sim / "tracks.csv"), "scans": scans,
                  "pairs": str(syn / "pairs.csv"), "references": str(syn / "references.csv"),
                  "ground_truth": str(sim / "truth" / "gt.ply"),
                  "true_cameras": str(sim / "truth" / "cameras.json")}
        data = json.loads(json.dumps(SMALL))
        data.update(simulate=False, inputs=inputs)
        real = PipelineConfig(data)
        run_dir = run_pipeline(real, tmp_path)
        a, b = summary_metrics(run_dir), summary_metrics(lay.run_dir)
        assert a["coarse_rms"] == pytest.approx(b["coarse_rms"], rel=1e-9)
        assert a["fine_rms"] == pytest.approx(b["fine_rms"], rel=1e-6)

    def test_missing_file(self, tmp_path):
        data = {"simulate": False, "inputs": {k: str(tmp_path / f"{k}.x") for k in
                                              ("mesh", "candidates", "cameras", "points",
                                               "tracks", "pairs")}}
        data["inputs"]["scans"] = [str(tmp_path / "s.ply")]
        cfg = PipelineConfig(data)
        with pytest.raises(ConfigError):
            run_stage(cfg, "simulate", tmp_path)


class TestSweep:
    def test_rows_and_csv(self, small_run, tmp_path):
        cfg, root, _ = small_run
        out = tmp_path / "s.csv"
        rows = sweep(cfg, "merge.rc_exponent", [0.0, 1.0], root, out)
        assert [r["status"] for r in rows] == ["ok", "ok"]
        with open(out) as fh:
            table = list(csv.DictReader(fh))
        assert [float(r["value"]) for r in table] == [0.0, 1.0]
        assert table[0]["fine_rms"] and table[0]["run_dir"].startswith("runs/")

    def test_failures_recorded(self, small_run, tmp_path):
        cfg, root, _ = small_run
        rows = sweep(cfg, "planner.t_c", [2.0, 0.5], root, tmp_path / "s.csv")
        assert rows[0]["status"] == "failed" and "t_c" in rows[0]["error"]
        assert rows[1]["status"] == "ok"

    def test_empty_values(self, tmp_path):
        out = tmp_path / "s.csv"
        assert sweep(PipelineConfig(), "planner.t_c", [], tmp_path, out) == []
        assert out.read_text().strip().split(",")[0] == "value"
        assert len(out.read_text().strip().splitlines()) == 1

    def test_unknown_parameter(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(PipelineConfig(), "planner.bogus", [1], tmp_path)


def test_gate_tracks_keeps_two(default_bundle):
    from scanmerge.scene import gate_tracks

    b = default_bundle
    cam, pt = b.observations[:, 0], b.observations[:, 1]
    keep = gate_tracks(b, cam, pt, 1.0)
    assert np.all(np.bincount(pt[keep], minlength=len(b.points)) >= 2)
    assert gate_tracks(b, cam, pt, None).all()
    wide = gate_tracks(b, cam, pt, 180.0)
    assert wide.all()
    mid = gate_tracks(b, cam, pt, 45.0)
    assert keep.sum() <= mid.sum() <= wide.sum()
