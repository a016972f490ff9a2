"""End-to-end pipeline: configuration, file-based stages, run directories, sweeps.

Every stage reads its inputs from files written by earlier stages and writes
its own outputs plus a ``report.json``. Stage outputs live under
``<root>/<stage>/<key>`` where the key hashes the part of the configuration
the stage depends on, so runs that differ only in later parameters share
earlier work. Each run gets ``<root>/runs/<config hash>`` holding the
resolved configuration and ``summary.jsonl``.
"""

from __future__ import annotations

import copy
import csv
import functools
import hashlib
import json
import logging
import math
import shutil
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import yaml

from . import io
from .geometry import CameraView, RigidPose, Sim3Transform
from .matching import (
    AERIAL,
    GROUND,
    OUTLIER,
    MatchNoise,
    aerial_matches,
    ground_matches,
)
from .merge import CovarianceModel, compute_omega, cost_ratio, problem_from_cameras, solve
from .metrics import precision_recall_fscore, rms_reference_error
from .planner import plan_locations, visibility_records
from .registration import RegistrationError, ransac_sim3, umeyama_sim3
from .scene import (
    SceneSpec,
    aerial_track_mask,
    gate_tracks,
    generate_scene,
    ground_truth_cloud,
    noisy_observations,
    pick_references,
    reference_region,
    scan_visible_tracks,
    simulate_pairs,
    simulate_scan,
    simulate_sfm,
)
from .synth import build_cube_rig, render_cube

log = logging.getLogger(__name__)

STAGES = ("simulate", "plan", "synth", "register", "merge", "eval")

# config sections each stage reads, cumulative along the stage order
STAGE_SECTIONS = {
    "simulate": ("seed", "simulate", "inputs", "scene", "sfm"),
    "plan": ("planner",),
    "synth": ("scan", "synth"),
    "register": ("register",),
    "merge": ("merge",),
    "eval": ("eval",),
}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "simulate": True,
    "inputs": {
        "mesh": None,
        "candidates": None,
        "cameras": None,
        "points": None,
        "tracks": None,
        "scans": [],
        "scan_poses": None,
        "pairs": None,
        "references": None,
        "ground_truth": None,
        "true_cameras": None,
    },
    "scene": {},
    "sfm": {
        "pixel_sigma": 0.5,
        "focal_error": 0.003,
        "rotation_sigma_deg": 0.3,
        "translation_sigma": 0.02,
        "point_sigma": 0.02,
        "max_track_angle_deg": None,
        "max_iters": 100,
        "tol": 1e-8,
        "gt_samples": 300000,
    },
    "planner": {"n_rays": 1000, "r_f": 0.1, "t_c": 0.5, "denominator": "candidate"},
    "scan": {"angular_resolution": 0.01, "range_sigma": 0.002},
    "synth": {
        "matcher": "synthetic",
        "cube_resolution": 512,
        "fill_radius": 3,
        "grad_thresh": 0.05,
        "n_aerial_views": 5,
        "partner_distance": 5.0,
        "partner_angle_deg": 60.0,
        "pixel_sigma": 0.5,
        "mismatch_fraction": 0.3,
        "mismatch_pixels": [2.0, 6.0],
        "outlier_fraction": 0.1,
        "max_ground_pairs": 150,
        "max_aerial_pairs": 60,
        "point_sigma": 0.01,
        "n_reference": 40,
        "reference_min_views": 10,
        "write_images": True,
    },
    "register": {"n_samples": 100, "dist_thresh": 0.1},
    "merge": {
        "omega": "auto",
        "rc_exponent": 0.0,
        "huber_delta": 1.0,
        "pixel_sigma": 1.0,
        "feature_scale_exponent": 1.0,
        "laser_sigma": 0.001,
        "range_coeff": 1e-5,
        "max_iters": 100,
        "tol": 1e-8,
        "linear_solver": "schur",
    },
    "eval": {"tau": 0.01, "tau_scale": 5.0},
}

SWEEP_COLUMNS = ("value", "status", "error", "run_dir", "n_scans", "n_pairs", "coarse_rms",
                 "fine_rms", "omega", "lg_rc", "iterations", "precision", "recall", "fscore",
                 "image_only_fscore")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# ----------------------------------------------------------------------------
# configuration


def _merge_defaults(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            raise ConfigError(f"unknown key {where}{k}")
        if isinstance(defaults[k], dict) and defaults[k] and k != "scene":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be a mapping")
            out[k] = _merge_defaults(defaults[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


class PipelineConfig:
    """Validated nested configuration with dotted-key access."""

    def __init__(self, data: Optional[dict] = None, base_dir: Optional[Path] = None):
        if data is not None and not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        self.data = _merge_defaults(DEFAULTS, data or {}, "")
        self._resolve_paths(Path(base_dir) if base_dir else Path.cwd())
        self.validate()

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        return cls(data or {}, path.parent)

    def _resolve_paths(self, base: Path):
        inp = self.data["inputs"]
        for k, v in inp.items():
            if k == "scans":
                if not isinstance(v, list):
                    raise ConfigError("inputs.scans must be a list of paths")
                inp[k] = [str((base / s).resolve()) for s in v]
            elif v is not None:
                inp[k] = str((base / v).resolve())

    def validate(self):
        d = self.data
        _require(isinstance(d["seed"], int) and not isinstance(d["seed"], bool) and d["seed"] >= 0,
                 "seed must be a nonnegative integer")
        _require(isinstance(d["simulate"], bool), "simulate must be true or false")
        try:
            self.scene_spec().validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"scene: {e}") from e
        for section in ("sfm", "planner", "scan", "synth", "register", "merge", "eval"):
            for k, v in d[section].items():
                dv = DEFAULTS[section][k]
                if _is_num(dv):
                    _require(_is_num(v), f"{section}.{k} must be a number")
        pl = d["planner"]
        _require(isinstance(pl["n_rays"], int) and pl["n_rays"] >= 1, "planner.n_rays must be >= 1")
        _require(pl["r_f"] > 0, "planner.r_f must be positive")
        _require(0 < pl["t_c"] <= 1, "planner.t_c must lie in (0, 1]")
        _require(pl["denominator"] in ("candidate", "literal"),
                 "planner.denominator must be 'candidate' or 'literal'")
        _require(d["scan"]["angular_resolution"] > 0, "scan.angular_resolution must be positive")
        _require(d["scan"]["range_sigma"] >= 0, "scan.range_sigma must be >= 0")
        sy = d["synth"]
        _require(sy["matcher"] in ("synthetic", "oracle"),
                 "synth.matcher must be 'synthetic' or 'oracle'")
        _require(isinstance(sy["cube_resolution"], int) and sy["cube_resolution"] >= 8,
                 "synth.cube_resolution must be an integer >= 8")
        _require(sy["grad_thresh"] > 0, "synth.grad_thresh must be positive")
        _require(sy["fill_radius"] >= 0, "synth.fill_radius must be >= 0")
        _require(isinstance(sy["mismatch_pixels"], list) and len(sy["mismatch_pixels"]) == 2,
                 "synth.mismatch_pixels must be [low, high]")
        for k in ("max_ground_pairs", "max_aerial_pairs", "n_reference", "n_aerial_views",
                  "reference_min_views"):
            _require(isinstance(sy[k], int) and sy[k] >= 0, f"synth.{k} must be an integer >= 0")
        sf = d["sfm"]
        for k in ("pixel_sigma", "focal_error", "rotation_sigma_deg", "translation_sigma",
                  "point_sigma", "tol"):
            _require(_is_num(sf[k]) and sf[k] >= 0, f"sfm.{k} must be a number >= 0")
        for k in ("max_iters", "gt_samples"):
            _require(isinstance(sf[k], int) and sf[k] >= 1, f"sfm.{k} must be an integer >= 1")
        ang = sf["max_track_angle_deg"]
        _require(ang is None or (_is_num(ang) and 0 < ang <= 180),
                 "sfm.max_track_angle_deg must be null or in (0, 180]")
        _require(isinstance(sy["write_images"], bool), "synth.write_images must be true or false")
        try:
            self.match_noise()
        except ValueError as e:
            raise ConfigError(f"synth: {e}") from e
        rg = d["register"]
        _require(isinstance(rg["n_samples"], int) and rg["n_samples"] >= 1,
                 "register.n_samples must be >= 1")
        _require(rg["dist_thresh"] > 0, "register.dist_thresh must be positive")
        m = d["merge"]
        _require(m["omega"] == "auto" or (_is_num(m["omega"]) and m["omega"] >= 0),
                 "merge.omega must be 'auto' or a nonnegative number")
        _require(m["huber_delta"] > 0, "merge.huber_delta must be positive")
        _require(isinstance(m["max_iters"], int) and m["max_iters"] >= 0,
                 "merge.max_iters must be an integer >= 0")
        _require(m["tol"] >= 0, "merge.tol must be >= 0")
        _require(m["linear_solver"] in ("schur", "dense"),
                 "merge.linear_solver must be 'schur' or 'dense'")
        try:
            self.covariance()
        except ValueError as e:
            raise ConfigError(f"merge: {e}") from e
        _require(d["eval"]["tau"] > 0 and d["eval"]["tau_scale"] > 0,
                 "eval.tau and eval.tau_scale must be positive")
        if not d["simulate"]:
            inp = d["inputs"]
            for k in ("mesh", "candidates", "cameras", "points", "tracks", "pairs"):
                _require(inp[k] is not None, f"inputs.{k} is required when simulate is false")
            _require(bool(inp["scans"]), "inputs.scans is required when simulate is false")

    def check_inputs_exist(self):
        for p in _input_paths(self.data["inputs"]):
            if not Path(p).exists():
                raise ConfigError(f"input file {p} does not exist")

    # -- accessors --------------------------------------------------------

    def get(self, key: str):
        node = self.data
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                raise KeyError(key)
            node = node[part]
        return node

    def with_value(self, key: str, value) -> "PipelineConfig":
        if not is_config_key(key):
            raise ConfigError(f"unknown configuration key {key!r}")
        data = copy.deepcopy(self.data)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return PipelineConfig(data)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec.from_dict(dict(self.data["scene"], seed=self.data["seed"]))

    def match_noise(self) -> MatchNoise:
        sy = self.data["synth"]
        return MatchNoise(sy["pixel_sigma"], sy["mismatch_fraction"],
                          tuple(sy["mismatch_pixels"]), sy["outlier_fraction"])

    def covariance(self) -> CovarianceModel:
        m = self.data["merge"]
        return CovarianceModel(m["pixel_sigma"], m["feature_scale_exponent"], m["laser_sigma"],
                               m["range_coeff"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def canonical(self, sections: Optional[Sequence[str]] = None) -> str:
        d = self.data if sections is None else {k: self.data[k] for k in sections}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def run_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def stage_key(self, stage: str) -> str:
        sections = []
        for s in STAGES[: STAGES.index(stage) + 1]:
            sections += STAGE_SECTIONS[s]
        h = hashlib.sha256(self.canonical(sections).encode())
        if not self.data["simulate"]:
            self.check_inputs_exist()
            for p in sorted(_input_paths(self.data["inputs"])):
                h.update(_file_digest(p).encode())
        return h.hexdigest()[:16]

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.data["seed"], STAGES.index(stage)])


def is_config_key(key: str) -> bool:
    node = DEFAULTS
    parts = key.split(".")
    for i, part in enumerate(parts):
        if part == "scene" and i == 0 and len(parts) == 2:
            return parts[1] in SceneSpec.__dataclass_fields__ and parts[1] != "seed"
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return not (isinstance(node, dict) and node)


def _input_paths(inputs: dict) -> list[str]:
    return [p for k, p in inputs.items() if k != "scans" and p] + list(inputs["scans"])


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# run layout


class RunLayout:
    def __init__(self, cfg: PipelineConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        self.run_dir = self.root / "runs" / cfg.run_hash()

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage / self.cfg.stage_key(stage)

    def done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / "report.json").exists()

    def require(self, stage: str) -> Path:
        if not self.done(stage):
            raise StageError(stage, f"outputs missing under {self.stage_dir(stage)}; run it first")
        return self.stage_dir(stage)

    def write_summary(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        io.write_json(self.run_dir / "config.json", self.cfg.to_dict())
        lines = [{"record": "config", "config": self.cfg.to_dict(), "run": self.cfg.run_hash()}]
        for st in STAGES:
            if self.done(st):
                d = self.stage_dir(st)
                lines.append({"record": "stage", "stage": st, "key": self.cfg.stage_key(st),
                              "dir": str(d.relative_to(self.root)),
                              "report": io.read_json(d / "report.json")})
        with open(self.run_dir / "summary.jsonl", "w") as fh:
            for rec in lines:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_summary(run_dir) -> list[dict]:
    with open(Path(run_dir) / "summary.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ----------------------------------------------------------------------------
# helpers


@functools.lru_cache(maxsize=4)
def _cached_bundle(spec_json: str):
    return generate_scene(SceneSpec.from_dict(json.loads(spec_json)))


def scene_bundle(cfg: PipelineConfig):
    return _cached_bundle(json.dumps(cfg.scene_spec().to_dict(), sort_keys=True))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _scan_paths(d: Path) -> list[Path]:
    return sorted((d / "scans").glob("scan_*.ply"))


# ----------------------------------------------------------------------------
# stages


def stage_simulate(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    """Ground-truth scene and imperfect SfM, or ingestion of real inputs."""
    truth = out / "truth"
    truth.mkdir(parents=True, exist_ok=True)
    if not cfg.get("simulate"):
        return _ingest(cfg, out)
    b = scene_bundle(cfg)
    sf = cfg.data["sfm"]
    rng = cfg.rng("simulate")
    cam, pt, pix, sc = noisy_observations(b, sf["pixel_sigma"], rng)
    keep = gate_tracks(b, cam, pt, sf["max_track_angle_deg"])
    cam, pt, pix, sc = cam[keep], pt[keep], pix[keep], sc[keep]
    cams, pts, rep = simulate_sfm(b, cam, pt, pix, sc, sf["focal_error"], sf["rotation_sigma_deg"],
                                  sf["translation_sigma"], sf["point_sigma"], rng,
                                  sf["max_iters"], sf["tol"])
    io.write_mesh_ply(out / "mesh.ply", b.sfm_mesh)
    io.write_json(out / "candidates.json", b.sfm_stations.tolist())
    io.write_cameras_json(out / "cameras.json", cams)
    io.write_points_ply(out / "points.ply", pts)
    io.write_tracks_csv(out / "tracks.csv", cam, pt, pix, sc)
    io.write_cameras_json(truth / "cameras.json", b.cameras)
    io.write_points_ply(truth / "points.ply", b.points)
    io.write_points_ply(truth / "gt.ply", ground_truth_cloud(b, sf["gt_samples"], rng))
    err = np.linalg.norm(pts - b.points, axis=1)
    return {
        "mode": "simulated",
        "n_facets": b.mesh.n_facets,
        "n_candidates": len(b.stations),
        "n_cameras": len(cams),
        "n_points": len(pts),
        "n_observations": len(cam),
        "sfm": rep.to_dict(),
        "sfm_point_rms_error": float(np.sqrt(np.mean(err ** 2))),
    }


def _ingest(cfg: PipelineConfig, out: Path) -> dict:
    inp = cfg.data["inputs"]
    cfg.check_inputs_exist()
    mesh = io.read_mesh_ply(inp["mesh"])
    io.write_mesh_ply(out / "mesh.ply", mesh)
    cand = np.asarray(io.read_json(inp["candidates"]), dtype=np.float64).reshape(-1, 3)
    io.write_json(out / "candidates.json", cand.tolist())
    cams = io.read_cameras_json(inp["cameras"])
    io.write_cameras_json(out / "cameras.json", cams)
    pts = io.read_points_ply(inp["points"])
    io.write_points_ply(out / "points.ply", pts)
    tr = io.read_tracks_csv(inp["tracks"])
    io.write_tracks_csv(out / "tracks.csv", tr["obs_camera"], tr["obs_point"], tr["obs_pixel"],
                        tr["obs_scale"])
    if inp["ground_truth"]:
        io.write_points_ply(out / "truth" / "gt.ply", io.read_points_ply(inp["ground_truth"]))
    if inp["true_cameras"]:
        io.write_cameras_json(out / "truth" / "cameras.json",
                              io.read_cameras_json(inp["true_cameras"]))
    return {"mode": "ingested", "n_facets": mesh.n_facets, "n_candidates": len(cand),
            "n_cameras": len(cams), "n_points": len(pts), "n_observations": len(tr["obs_camera"])}


def stage_plan(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    src = lay.require("simulate")
    pl = cfg.data["planner"]
    mesh = io.read_mesh_ply(src / "mesh.ply")
    cand = np.asarray(io.read_json(src / "candidates.json"), dtype=np.float64).reshape(-1, 3)
    recs = visibility_records(mesh, cand, n_rays=pl["n_rays"], r_f=pl["r_f"])
    res = plan_locations(recs, pl["t_c"], pl["denominator"])
    rep = res.to_dict()
    rep["stations"] = cand[res.selected].tolist()
    rep["n_visible"] = [r.n_facets for r in recs]
    io.write_json(out / "plan.json", rep)
    return rep


def stage_synth(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    """Scan capture (simulated), view synthesis and 2D-to-3D matching."""
    src = lay.require("simulate")
    plan = io.read_json(lay.require("plan") / "plan.json")
    (out / "scans").mkdir(parents=True, exist_ok=True)
    if not cfg.get("simulate"):
        return _synth_ingested(cfg, src, out)
    sy, sc = cfg.data["synth"], cfg.data["scan"]
    b = scene_bundle(cfg)
    s = b.spec.sfm_scale
    rng = cfg.rng("synth")
    scans = []
    for k in plan["selected"]:
        yaw = float(rng.uniform(0, 2 * math.pi))
        scans.append(simulate_scan(b, b.stations[k], sc["angular_resolution"], sc["range_sigma"],
                                   yaw, rng))
    for i, scan in enumerate(scans):
        io.write_cloud_ply(out / "scans" / f"scan_{i:03d}.ply", scan.cloud)
    (out / "truth").mkdir(exist_ok=True)
    io.write_transforms_json(out / "truth" / "scan_transforms.json",
                             [x.sfm_transform(s) for x in scans])

    tracks = io.read_tracks_csv(src / "tracks.csv")
    cams = io.read_cameras_json(src / "cameras.json")
    pts = io.read_points_ply(src / "points.ply")
    aerial = aerial_track_mask(cams, tracks["obs_camera"], tracks["obs_point"], len(pts))
    reg = cfg.data["register"]
    per_scan = []
    if sy["matcher"] == "oracle":
        pr = simulate_pairs(b, scans, aerial, sy["point_sigma"], sy["outlier_fraction"],
                            sy["max_ground_pairs"], sy["n_reference"], rng)
        pairs = {k: pr[k] for k in ("pair_scan", "pair_channel", "pair_laser", "pair_point",
                                    "pair_inlier")}
        refs = (pr["ref_scan"], pr["ref_point"], pr["ref_laser"])
        for i in range(len(scans)):
            m = pairs["pair_scan"] == i
            per_scan.append({"ground": int((m & (pairs["pair_channel"] == GROUND)).sum()),
                             "aerial": int((m & (pairs["pair_channel"] == AERIAL)).sum())})
    else:
        ref_scan, ref_point, ref_laser, used = pick_references(
            b, scans, sy["n_reference"], rng,
            np.bincount(tracks["obs_point"], minlength=len(pts)), sy["reference_min_views"])
        refs = (ref_scan, ref_point, ref_laser)
        noise = cfg.match_noise()
        rows = {k: [] for k in ("scan", "chan", "laser", "point", "kind")}
        for i, scan in enumerate(scans):
            vis = scan_visible_tracks(b, scan)
            vis = vis[~used[vis]]
            track_laser = scan.pose.inverse().apply(b.world_points)
            rig = build_cube_rig(resolution=sy["cube_resolution"])
            faces = render_cube(scan.cloud, rig, sy["fill_radius"], scan_id=i)
            if sy["write_images"]:
                _write_faces(out / "images", i, rig, faces, sy["grad_thresh"])
            g = ground_matches(faces, rig, scan.pose, s, cams, tracks["obs_camera"],
                               tracks["obs_point"], track_laser, vis, noise,
                               sy["max_ground_pairs"], rng, sy["grad_thresh"],
                               sy["partner_distance"], sy["partner_angle_deg"])
            info = {"ground": len(g), "aerial": 0, "aerial_views": [], "first_pass_inliers": 0}
            parts = [(GROUND, g)]
            if len(g) >= 3 and sy["n_aerial_views"] > 0 and sy["max_aerial_pairs"] > 0:
                try:
                    first = ransac_sim3(g.laser, pts[g.track], n_samples=reg["n_samples"],
                                        dist_thresh=reg["dist_thresh"],
                                        seed=cfg.get("seed") * 1000 + i)
                except RegistrationError as e:
                    log.warning("scan %d: first-pass registration failed (%s)", i, e)
                else:
                    info["first_pass_inliers"] = int(len(first.inliers))
                    a, chosen = aerial_matches(scan.cloud, first.transform, cams,
                                               tracks["obs_camera"], tracks["obs_point"],
                                               track_laser, vis, noise, sy["max_aerial_pairs"],
                                               rng, sy["grad_thresh"], sy["n_aerial_views"],
                                               sy["fill_radius"], i)
                    info["aerial"] = len(a)
                    info["aerial_views"] = chosen
                    parts.append((AERIAL, a))
            for chan, m in parts:
                rows["scan"] += [i] * len(m)
                rows["chan"] += [chan] * len(m)
                rows["laser"].append(m.laser)
                rows["point"] += m.track.tolist()
                rows["kind"] += m.kind.tolist()
            kinds = np.concatenate([m.kind for _, m in parts])
            info["kinds"] = np.bincount(kinds, minlength=3).tolist()
            per_scan.append(info)
        n = len(rows["scan"])
        pairs = {
            "pair_scan": np.asarray(rows["scan"], dtype=np.int64),
            "pair_channel": np.asarray(rows["chan"], dtype=np.int64),
            "pair_laser": np.vstack(rows["laser"]) if n else np.zeros((0, 3)),
            "pair_point": np.asarray(rows["point"], dtype=np.int64),
            "pair_inlier": np.asarray(rows["kind"]) != OUTLIER,
        }
    n = len(pairs["pair_scan"])
    io.write_pairs_csv(out / "pairs.csv", pairs["pair_scan"], pairs["pair_channel"],
                       pairs["pair_laser"], pairs["pair_point"], np.zeros((n, 3)),
                       np.linalg.norm(pairs["pair_laser"], axis=1), pairs["pair_inlier"])
    ref_scan, ref_point, ref_laser = refs
    io.write_references_csv(out / "references.csv", ref_scan, ref_point, pts[ref_point],
                            ref_laser, [reference_region(b.spec)] * len(ref_scan))
    return {"matcher": sy["matcher"], "n_scans": len(scans),
            "scan_points": [len(x.cloud) for x in scans], "n_pairs": n,
            "n_references": len(ref_scan), "scans": per_scan}


def _write_faces(d: Path, scan_id: int, rig, faces, grad_thresh: float):
    from .synth import depth_edge_mask

    d.mkdir(parents=True, exist_ok=True)
    for name, img in zip(rig.names, faces):
        if img is None:
            continue
        stem = f"scan_{scan_id:03d}_{name.replace('+', 'p').replace('-', 'm')}"
        io.write_png(d / f"{stem}.png", img.rgb)
        io.write_pfm(d / f"{stem}.pfm", img.depth)
        io.write_png(d / f"{stem}_edges.png", depth_edge_mask(img, grad_thresh).astype(np.uint8) * 255)


def _synth_ingested(cfg: PipelineConfig, src: Path, out: Path) -> dict:
    """Real data: render cube views of the given scans; matches come from a file."""
    inp, sy = cfg.data["inputs"], cfg.data["synth"]
    sizes = []
    for i, p in enumerate(inp["scans"]):
        cloud = io.read_cloud_ply(p)
        io.write_cloud_ply(out / "scans" / f"scan_{i:03d}.ply", cloud)
        sizes.append(len(cloud))
        if sy["write_images"]:
            rig = build_cube_rig(resolution=sy["cube_resolution"])
            _write_faces(out / "images", i, rig, render_cube(cloud, rig, sy["fill_radius"], i),
                         sy["grad_thresh"])
    pr = io.read_pairs_csv(inp["pairs"])
    io.write_pairs_csv(out / "pairs.csv", pr["pair_scan"], pr["pair_channel"], pr["pair_laser"],
                       pr["pair_point"], pr["pair_anchor"], pr["pair_range"], pr["pair_inlier"])
    n_ref = 0
    if inp["references"]:
        rf = io.read_references_csv(inp["references"])
        io.write_references_csv(out / "references.csv", rf["scan"], rf["point"], rf["sfm"],
                                rf["laser"], rf["region"])
        n_ref = len(rf["scan"])
    return {"matcher": "file", "n_scans": len(sizes), "scan_points": sizes,
            "n_pairs": len(pr["pair_scan"]), "n_references": n_ref}


def stage_register(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    src, syn = lay.require("simulate"), lay.require("synth")
    reg = cfg.data["register"]
    pts = io.read_points_ply(src / "points.ply")
    pr = io.read_pairs_csv(syn / "pairs.csv")
    n_scans = len(_scan_paths(syn))
    transforms, reports, inliers = [], [], []
    for i in range(n_scans):
        rows = np.flatnonzero(pr["pair_scan"] == i)
        target = np.where(pr["pair_point"][rows, None] >= 0,
                          pts[np.maximum(pr["pair_point"][rows], 0)], pr["pair_anchor"][rows])
        try:
            r = ransac_sim3(pr["pair_laser"][rows], target, n_samples=reg["n_samples"],
                            dist_thresh=reg["dist_thresh"], seed=cfg.get("seed") * 1000 + i)
        except RegistrationError as e:
            raise StageError("register", f"scan {i}: {e}") from e
        transforms.append(r.transform)
        inliers.append(rows[r.inliers])
        d = r.to_dict()
        d["n_pairs"] = int(len(rows))
        d["labelled_outliers_kept"] = int((~pr["pair_inlier"][rows[r.inliers]]).sum())
        reports.append(d)
    io.write_transforms_json(out / "transforms.json", transforms)
    io.write_json(out / "inliers.json", [x.tolist() for x in inliers])
    return {"scans": reports}


def stage_merge(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    src, syn, reg = lay.require("simulate"), lay.require("synth"), lay.require("register")
    m = cfg.data["merge"]
    cams = io.read_cameras_json(src / "cameras.json")
    pts = io.read_points_ply(src / "points.ply")
    tracks = io.read_tracks_csv(src / "tracks.csv")
    pr = io.read_pairs_csv(syn / "pairs.csv")
    coarse = io.read_transforms_json(reg / "transforms.json")
    keep = np.array(sorted(q for rows in io.read_json(reg / "inliers.json") for q in rows),
                    dtype=np.int64)
    prob = problem_from_cameras(
        cams, pts, coarse, **tracks,
        pair_scan=pr["pair_scan"][keep], pair_laser=pr["pair_laser"][keep],
        pair_point=pr["pair_point"][keep], pair_anchor=pr["pair_anchor"][keep],
        pair_range=pr["pair_range"][keep], pair_channel=pr["pair_channel"][keep],
        huber_delta=m["huber_delta"], covariance=cfg.covariance())
    if m["omega"] == "auto":
        omega = compute_omega(prob, m["rc_exponent"])
    else:
        omega = float(m["omega"]) * 10.0 ** m["rc_exponent"]
    prob = prob.copy(omega=omega)
    lg_rc = math.log10(cost_ratio(prob)) if omega > 0 else None
    rep, res = solve(prob, max_iters=m["max_iters"], tol=m["tol"],
                     linear_solver=m["linear_solver"])
    merged = [res.scan_transform(i) for i in range(res.n_scans)]
    io.write_cameras_json(out / "cameras.json", [
        CameraView(c.intrinsics, RigidPose(res.cam_R[j], res.cam_t[j]), c.label)
        for j, c in enumerate(cams)])
    io.write_points_ply(out / "points.ply", res.points)
    io.write_transforms_json(out / "transforms.json", merged)
    d = rep.to_dict()
    d["lg_rc_initial"] = lg_rc
    d["n_pairs"] = int(len(keep))
    io.write_json(out / "solve.json", _jsonable(d))
    return d


def _align_to_truth(cams_path: Path, truth_cams: Optional[Path]) -> Sim3Transform:
    if truth_cams is None or not truth_cams.exists():
        return Sim3Transform.identity()
    est = np.array([c.center for c in io.read_cameras_json(cams_path)])
    true = np.array([c.center for c in io.read_cameras_json(truth_cams)])
    return umeyama_sim3(est, true)


def stage_eval(cfg: PipelineConfig, lay: RunLayout, out: Path) -> dict:
    src, syn = lay.require("simulate"), lay.require("synth")
    reg, mrg = lay.require("register"), lay.require("merge")
    ev = cfg.data["eval"]
    rep: dict[str, Any] = {}
    pts0 = io.read_points_ply(src / "points.ply")
    pts1 = io.read_points_ply(mrg / "points.ply")
    coarse = io.read_transforms_json(reg / "transforms.json")
    fine = io.read_transforms_json(mrg / "transforms.json")
    ref_path = syn / "references.csv"
    if ref_path.exists():
        rf = io.read_references_csv(ref_path)
        if len(rf["scan"]):
            linked = rf["point"] >= 0
            sfm0 = np.where(linked[:, None], pts0[np.maximum(rf["point"], 0)], rf["sfm"])
            sfm1 = np.where(linked[:, None], pts1[np.maximum(rf["point"], 0)], rf["sfm"])
            rep["coarse_rms"] = rms_reference_error(sfm0, rf["laser"], coarse, rf["scan"])
            rep["fine_rms"] = rms_reference_error(sfm1, rf["laser"], fine, rf["scan"])
            rep["n_references"] = int(len(rf["scan"]))
    gt_path = src / "truth" / "gt.ply"
    if gt_path.exists():
        tau = ev["tau"] * ev["tau_scale"]
        gt = io.read_points_ply(gt_path)
        truth_cams = src / "truth" / "cameras.json"
        a0 = _align_to_truth(src / "cameras.json", truth_cams)
        a1 = _align_to_truth(mrg / "cameras.json", truth_cams)
        clouds = [pts1] + [t.apply(io.read_cloud_ply(p).points)
                           for t, p in zip(fine, _scan_paths(syn))]
        merged = a1.apply(np.vstack(clouds))
        image_only = a0.apply(pts0)
        io.write_points_ply(out / "merged.ply", merged)
        rep["tau"] = tau
        rep["merged"] = precision_recall_fscore(merged, gt, tau).to_dict()
        rep["image_only"] = precision_recall_fscore(image_only, gt, tau).to_dict()
    io.write_json(out / "eval.json", _jsonable(rep))
    return rep


STAGE_FUNCS: dict[str, Callable] = {
    "simulate": stage_simulate,
    "plan": stage_plan,
    "synth": stage_synth,
    "register": stage_register,
    "merge": stage_merge,
    "eval": stage_eval,
}


# ----------------------------------------------------------------------------
# driver


def run_stage(cfg: PipelineConfig, stage: str, root, force: bool = False) -> Path:
    """Run one stage (reusing finished outputs unless ``force``); returns its directory."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    lay = RunLayout(cfg, root)
    out = lay.stage_dir(stage)
    if lay.done(stage) and not force:
        log.info("%s: reusing %s", stage, out)
    else:
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log.info("%s: running in %s", stage, out)
        try:
            report = STAGE_FUNCS[stage](cfg, lay, out)
        except StageError:
            raise
        except ConfigError:
            raise
        except Exception as e:  # noqa: BLE001 - surfaced with the stage name
            raise StageError(stage, f"{type(e).__name__}: {e}") from e
        io.write_json(out / "report.json", _jsonable(report))
    lay.write_summary()
    return out


def run_pipeline(cfg: PipelineConfig, root, force: bool = False) -> Path:
    """All stages in order; returns the run directory holding ``summary.jsonl``."""
    for st in STAGES:
        run_stage(cfg, st, root, force)
    return RunLayout(cfg, root).run_dir


def summary_metrics(run_dir) -> dict:
    """Flat metrics used as sweep columns."""
    recs = {r["stage"]: r["report"] for r in read_summary(run_dir) if r["record"] == "stage"}
    out: dict[str, Any] = {}
    if "plan" in recs:
        out["n_scans"] = recs["plan"]["n_selected"]
    if "synth" in recs:
        out["n_pairs"] = recs["synth"]["n_pairs"]
    if "merge" in recs:
        out["omega"] = recs["merge"]["omega"]
        out["lg_rc"] = recs["merge"]["lg_rc_initial"]
        out["iterations"] = recs["merge"]["iterations"]
    if "eval" in recs:
        e = recs["eval"]
        out["coarse_rms"] = e.get("coarse_rms")
        out["fine_rms"] = e.get("fine_rms")
        if "merged" in e:
            out["precision"] = e["merged"]["precision"]
            out["recall"] = e["merged"]["recall"]
            out["fscore"] = e["merged"]["fscore"]
            out["image_only_fscore"] = e["image_only"]["fscore"]
    return out


def sweep(cfg: PipelineConfig, parameter: str, values: Sequence, root,
          csv_path=None) -> list[dict]:
    """One pipeline run per value; failures become rows with ``status=failed``."""
    if not is_config_key(parameter):
        raise ConfigError(f"unknown configuration key {parameter!r}")
    rows = []
    for v in values:
        row = {c: "" for c in SWEEP_COLUMNS}
        row["value"] = v
        try:
            c = cfg.with_value(parameter, v)
            run_dir = run_pipeline(c, root)
        except (ConfigError, StageError) as e:
            row.update(status="failed", error=str(e))
        else:
            row.update(status="ok", run_dir=str(Path(run_dir).relative_to(root)))
            row.update({k: v for k, v in summary_metrics(run_dir).items() if v is not None})
        rows.append(row)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
