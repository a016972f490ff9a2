"""Synthetic scenes with ground truth for every pipeline stage.

A scene is a walled court (optionally roofed, optionally split in two rooms
by a partition with a doorway, optionally with box pillars). Each planar
region is triangulated on a jittered grid whose facet size is controlled per
region, which is how "texture" is emulated: the planner only sees geometry.

Frames: the scene is built in a metric *world* frame. The SfM reconstruction
lives in a frame that differs from it by a global scale ``sfm_scale`` (the
inaccurate GPS scale), so a laser scan maps into the SfM frame through
``Sim3(sfm_scale, R_scan, sfm_scale * t_scan)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CameraView,
    ColoredPointCloud,
    RigidPose,
    Sim3Transform,
    TriMesh,
    look_at_rotation,
    so3_exp,
)
from .merge import MergeProblem, make_layout, solve
from .raycast import RayCaster

log = logging.getLogger(__name__)

FULL_RIG_PITCHES = (-40.0, -20.0, 0.0, 20.0, 40.0)
FULL_RIG_YAWS = tuple(float(y) for y in range(0, 360, 40))


class InvalidSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    """Layout, density and noise parameters of a synthetic scene."""

    length: float = 10.0
    width: float = 6.0
    height: float = 4.0
    ceiling: bool = False
    partition: bool = False
    partition_x: Optional[float] = None
    door_width: float = 1.5
    door_height: float = 2.2
    pillars: list = field(default_factory=list)  # [x, y, side]
    facet_size: float = 0.25
    density: dict = field(default_factory=dict)  # region name -> multiplier
    jitter: float = 0.05
    grid_spacing: float = 3.0
    station_height: float = 1.5
    stations: Optional[list] = None  # explicit candidate stations (world)
    pitches_deg: tuple = (-20.0, 20.0)
    yaws_deg: tuple = (0.0, 90.0, 180.0, 270.0)
    image_width: int = 640
    image_height: int = 480
    focal: float = 500.0
    n_aerial: int = 4
    aerial_height: float = 14.0
    aerial_radius: float = 10.0
    n_points: int = 5000
    min_views: int = 2
    sfm_scale: float = 1.0
    pixel_sigma: float = 0.5
    point_sigma: float = 0.01
    outlier_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> "SceneSpec":
        for name in ("length", "width", "height", "facet_size", "grid_spacing", "focal",
                     "sfm_scale"):
            if not getattr(self, name) > 0:
                raise InvalidSpecError(f"{name} must be positive")
        if not 0 <= self.outlier_fraction < 1:
            raise InvalidSpecError("outlier_fraction must lie in [0, 1)")
        if not 0 < self.station_height < self.height:
            raise InvalidSpecError("stations must be inside the room")
        if any(m <= 0 for m in self.density.values()):
            raise InvalidSpecError("density multipliers must be positive")
        if self.partition:
            px = self.partition_x if self.partition_x is not None else self.length / 2
            if not 0 < px < self.length or self.door_width >= self.width:
                raise InvalidSpecError("partition does not fit the room")
            if self.door_height >= self.height:
                raise InvalidSpecError("door taller than the room")
        for x, y, s in self.pillars:
            if not (s > 0 and s / 2 < x < self.length - s / 2 and s / 2 < y < self.width - s / 2):
                raise InvalidSpecError(f"pillar at ({x}, {y}) does not fit")
        if not 0 <= self.jitter < 0.5:
            raise InvalidSpecError("jitter must lie in [0, 0.5)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pitches_deg"] = list(self.pitches_deg)
        d["yaws_deg"] = list(self.yaws_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpecError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("pitches_deg", "yaws_deg"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(eq=False)
class GroundTruthBundle:
    spec: SceneSpec
    mesh: TriMesh  # metric world frame
    facet_colors: np.ndarray
    facet_region: np.ndarray
    regions: list
    stations: np.ndarray  # candidate stations, world frame
    cameras: list  # true CameraViews in the SfM frame
    points: np.ndarray  # true track positions in the SfM frame
    point_facets: np.ndarray
    observations: np.ndarray  # (n, 2) int pairs (camera, point), noise-free visibility
    caster: RayCaster = field(repr=False, default=None)

    @property
    def sfm_from_world(self) -> Sim3Transform:
        return Sim3Transform(self.spec.sfm_scale)

    @property
    def sfm_mesh(self) -> TriMesh:
        return self.mesh.transformed(self.sfm_from_world)

    @property
    def sfm_stations(self) -> np.ndarray:
        return self.sfm_from_world.apply(self.stations)

    @property
    def world_points(self) -> np.ndarray:
        return self.points / self.spec.sfm_scale

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.spec
        return np.zeros(3), np.array([s.length, s.width, s.height])


# ----------------------------------------------------------------------------
# mesh construction


def _grid_rect(origin, u, v, h: float, jitter: float, rng: np.random.Generator):
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    lu, lv = np.linalg.norm(u), np.linalg.norm(v)
    nu = max(1, int(round(lu / h)))
    nv = max(1, int(round(lv / h)))
    a = np.linspace(0.0, 1.0, nu + 1)
    b = np.linspace(0.0, 1.0, nv + 1)
    A, B = np.meshgrid(a, b, indexing="ij")
    if jitter > 0 and nu > 1 and nv > 1:
        inner = np.zeros_like(A, dtype=bool)
        inner[1:-1, 1:-1] = True
        A = A + inner * rng.uniform(-jitter, jitter, A.shape) / nu
        B = B + inner * rng.uniform(-jitter, jitter, B.shape) / nv
    verts = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    p00, p10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    p01, p11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([p00, p10, p11], 1), np.stack([p00, p11, p01], 1)])
    return verts, tris


def _regions(spec: SceneSpec) -> list[tuple[str, list]]:
    L, W, H = spec.length, spec.width, spec.height
    ex, ey, ez = np.eye(3)
    regs: list[tuple[str, list]] = [
        ("floor", [(np.zeros(3), L * ex, W * ey)]),
        ("wall_x0", [(np.zeros(3), W * ey, H * ez)]),
        ("wall_x1", [(L * ex, W * ey, H * ez)]),
        ("wall_y0", [(np.zeros(3), L * ex, H * ez)]),
        ("wall_y1", [(W * ey, L * ex, H * ez)]),
    ]
    if spec.ceiling:
        regs.append(("ceiling", [(H * ez, L * ex, W * ey)]))
    if spec.partition:
        px = spec.partition_x if spec.partition_x is not None else L / 2
        d0 = (W - spec.door_width) / 2
        d1 = d0 + spec.door_width
        base = px * ex
        regs.append(("partition", [
            (base, d0 * ey, H * ez),
            (base + d1 * ey, (W - d1) * ey, H * ez),
            (base + d0 * ey + spec.door_height * ez, spec.door_width * ey,
             (H - spec.door_height) * ez),
        ]))
    for i, (x, y, s) in enumerate(spec.pillars):
        x0, y0 = x - s / 2, y - s / 2
        c = np.array([x0, y0, 0.0])
        rects = [
            (c, s * ex, H * ez),
            (c + s * ey, s * ex, H * ez),
            (c, s * ey, H * ez),
            (c + s * ex, s * ey, H * ez),
        ]
        if not spec.ceiling:
            rects.append((c + H * ez, s * ex, s * ey))
        regs.append((f"pillar{i}", rects))
    return regs


def build_mesh(spec: SceneSpec, rng: np.random.Generator):
    verts, tris, region_of = [], [], []
    names = []
    offset = 0
    for ridx, (name, rects) in enumerate(_regions(spec)):
        names.append(name)
        h = spec.facet_size / math.sqrt(spec.density.get(name, 1.0))
        for origin, u, v in rects:
            vv, tt = _grid_rect(origin, u, v, h, spec.jitter, rng)
            verts.append(vv)
            tris.append(tt + offset)
            region_of.append(np.full(len(tt), ridx))
            offset += len(vv)
    mesh = TriMesh(np.concatenate(verts), np.concatenate(tris))
    return mesh, np.concatenate(region_of), names


def region_colors(n_regions: int, facet_region: np.ndarray, rng: np.random.Generator):
    base = rng.integers(60, 200, size=(n_regions, 3))
    jit = rng.integers(-40, 41, size=(len(facet_region), 3))
    return np.clip(base[facet_region] + jit, 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# stations and cameras


def grid_stations(spec: SceneSpec) -> np.ndarray:
    """Centers of a ``grid_spacing`` grid laid over the floor, minus blocked cells."""
    if spec.stations is not None:
        return np.asarray(spec.stations, dtype=np.float64).reshape(-1, 3)
    g = spec.grid_spacing
    nx = max(1, int(spec.length // g))
    ny = max(1, int(spec.width // g))
    xs = (spec.length - nx * g) / 2 + g * (np.arange(nx) + 0.5)
    ys = (spec.width - ny * g) / 2 + g * (np.arange(ny) + 0.5)
    out = []
    px = spec.partition_x if spec.partition_x is not None else spec.length / 2
    for x in xs:
        for y in ys:
            if spec.partition and abs(x - px) < 0.3:
                continue
            if any(abs(x - cx) < s / 2 + 0.3 and abs(y - cy) < s / 2 + 0.3
                   for cx, cy, s in spec.pillars):
                continue
            out.append((x, y, spec.station_height))
    if not out:
        raise InvalidSpecError("no free candidate station")
    return np.array(out)


def station_rig(center, pitches_deg, yaws_deg, intr: CameraIntrinsics,
                label: str = "captured-ground") -> list[CameraView]:
    """Cameras sharing one center, one per (pitch, yaw) pair."""
    cams = []
    c = np.asarray(center, dtype=np.float64)
    for p in pitches_deg:
        for y in yaws_deg:
            pr, yr = math.radians(p), math.radians(y)
            fwd = np.array([math.cos(pr) * math.cos(yr), math.cos(pr) * math.sin(yr), math.sin(pr)])
            R = look_at_rotation(fwd)
            cams.append(CameraView(intr, RigidPose(R, -R @ c), label))
    return cams


def aerial_cameras(spec: SceneSpec, intr: CameraIntrinsics) -> list[CameraView]:
    target = np.array([spec.length / 2, spec.width / 2, 0.0])
    cams = []
    for k in range(spec.n_aerial):
        a = 2 * math.pi * k / spec.n_aerial
        c = target + np.array([spec.aerial_radius * math.cos(a),
                               spec.aerial_radius * math.sin(a), spec.aerial_height])
        R = look_at_rotation(target - c)
        cams.append(CameraView(intr, RigidPose(R, -R @ c), "captured-aerial"))
    return cams


def _scale_view(cam: CameraView, s: float) -> CameraView:
    return CameraView(cam.intrinsics, RigidPose(cam.pose.rotation, s * cam.pose.translation),
                      cam.label)


def visible_points(cam: CameraView, points: np.ndarray, caster: RayCaster,
                   world_scale: float = 1.0) -> np.ndarray:
    """Indices of points inside the image, in front, and unoccluded.

    ``points`` and ``cam`` live in the SfM frame; occlusion is tested on the
    metric mesh after dividing by ``world_scale``.
    """
    uv, front = cam.project(points)
    ok = front & cam.in_image(uv)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return idx
    vis = caster.visible(cam.center / world_scale, points[idx] / world_scale)
    return idx[vis]


def generate_scene(spec: SceneSpec) -> GroundTruthBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mesh, facet_region, names = build_mesh(spec, rng)
    colors = region_colors(len(names), facet_region, rng)
    caster = RayCaster(mesh)
    stations = grid_stations(spec)
    s = spec.sfm_scale

    intr = CameraIntrinsics(spec.focal, spec.focal, spec.image_width / 2, spec.image_height / 2,
                            spec.image_width, spec.image_height)
    cams_world = []
    for st in stations:
        cams_world += station_rig(st, spec.pitches_deg, spec.yaws_deg, intr)
    if not spec.ceiling and spec.n_aerial > 0:
        cams_world += aerial_cameras(spec, intr)
    cameras = [_scale_view(c, s) for c in cams_world]

    # candidate surface samples; keep those seen by enough cameras
    pts_w, pfac = mesh.sample_surface(3 * spec.n_points, rng)
    pts = s * pts_w
    counts = np.zeros(len(pts), dtype=np.int64)
    vis_lists = []
    for j, cam in enumerate(cameras):
        idx = visible_points(cam, pts, caster, s)
        vis_lists.append(idx)
        counts[idx] += 1
    keep = np.flatnonzero(counts >= spec.min_views)[: spec.n_points]
    remap = np.full(len(pts), -1)
    remap[keep] = np.arange(len(keep))
    obs = []
    for j, idx in enumerate(vis_lists):
        k = remap[idx]
        k = k[k >= 0]
        obs.append(np.stack([np.full(len(k), j), k], axis=1))
    observations = np.concatenate(obs).astype(np.int64)
    order = np.lexsort((observations[:, 0], observations[:, 1]))
    observations = observations[order]
    log.info("scene: %d facets, %d cameras, %d points, %d observations",
             mesh.n_facets, len(cameras), len(keep), len(observations))
    return GroundTruthBundle(spec, mesh, colors, facet_region, names, stations, cameras,
                             pts[keep], pfac[keep], observations, caster)


def coarse_wall_spec(seed: int = 0, multiplier: float = 0.1) -> SceneSpec:
    """Square open court whose ``wall_x1`` is meshed coarser than the rest.

    The four candidate stations sit at the same distance from the court
    center, each one closest to a different wall; station 1 faces the coarse
    wall.
    """
    return SceneSpec(length=8.0, width=8.0, height=4.0, density={"wall_x1": multiplier},
                     stations=[[2.0, 4.0, 1.5], [6.0, 4.0, 1.5], [4.0, 2.0, 1.5], [4.0, 6.0, 1.5]],
                     n_aerial=0, seed=seed)


def two_room_spec(seed: int = 0) -> SceneSpec:
    """Two rooms joined by a doorway, eight candidate stations."""
    return SceneSpec(length=12.0, width=6.0, height=3.0, ceiling=True, partition=True,
                     pillars=[[3.0, 3.0, 0.6]], density={"pillar0": 4.0, "wall_y1": 0.25},
                     grid_spacing=3.0, seed=seed)


# ----------------------------------------------------------------------------
# laser scans


@dataclass(eq=False)
class SimulatedScan:
    cloud: ColoredPointCloud  # scan frame (meters)
    pose: RigidPose  # scan frame -> metric world
    facets: np.ndarray  # facet hit by each point

    def sfm_transform(self, sfm_scale: float) -> Sim3Transform:
        """True scan-to-SfM similarity."""
        return Sim3Transform(sfm_scale, self.pose.rotation, sfm_scale * self.pose.translation)


def scan_pose(station, yaw: float) -> RigidPose:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidPose(R, np.asarray(station, dtype=np.float64))


def spherical_directions(angular_resolution: float) -> np.ndarray:
    n_el = max(1, int(round(math.pi / angular_resolution)))
    n_az = max(1, int(round(2 * math.pi / angular_resolution)))
    el = -math.pi / 2 + (np.arange(n_el) + 0.5) * math.pi / n_el
    az = np.arange(n_az) * 2 * math.pi / n_az
    E, Az = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(Az), np.cos(E) * np.sin(Az), np.sin(E)], -1).reshape(-1, 3)


def simulate_scan(bundle: GroundTruthBundle, station, angular_resolution: float = 0.01,
                  range_sigma: float = 0.0, yaw: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> SimulatedScan:
    """Spherical sweep from ``station`` (world frame); nearest hit per ray."""
    pose = scan_pose(station, yaw)
    d_scan = spherical_directions(angular_resolution)
    d_world = d_scan @ pose.rotation.T
    t, f = bundle.caster.cast(np.broadcast_to(pose.translation, d_world.shape), d_world)
    hit = f >= 0
    r = t[hit]
    if range_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(bundle.spec.seed + 1)
        r = r + rng.normal(0.0, range_sigma, size=r.shape)
    pts = d_scan[hit] * r[:, None]
    cloud = ColoredPointCloud(pts, bundle.facet_colors[f[hit]], np.abs(r))
    return SimulatedScan(cloud, pose, f[hit])


# ----------------------------------------------------------------------------
# correspondences


@dataclass(eq=False)
class CorrespondenceSet:
    """Measurements tying images and scans to the SfM reconstruction.

    2D rows: camera, track, pixel, feature scale. 3D rows: scan, channel,
    laser point (scan frame), SfM endpoint (track id or -1 with a fixed
    anchor), inlier label.
    """

    obs_camera: np.ndarray
    obs_point: np.ndarray
    obs_pixel: np.ndarray
    obs_scale: np.ndarray
    pair_scan: np.ndarray
    pair_channel: np.ndarray  # 0 ground, 1 aerial
    pair_laser: np.ndarray
    pair_point: np.ndarray
    pair_anchor: np.ndarray
    pair_inlier: np.ndarray
    ref_scan: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ref_point: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ref_laser: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ref_region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U8"))

    def pairs_for_scan(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.pair_scan == i)


CHANNELS = ("ground", "aerial")


def noisy_observations(bundle: GroundTruthBundle, pixel_sigma: float,
                       rng: np.random.Generator):
    """Project every visible (camera, track) pair with scale-dependent pixel noise."""
    obs = bundle.observations
    n = len(obs)
    scale = rng.uniform(1.0, 2.0, size=n)
    pix = np.empty((n, 2))
    for j in np.unique(obs[:, 0]):
        rows = np.flatnonzero(obs[:, 0] == j)
        uv, _ = bundle.cameras[j].project(bundle.points[obs[rows, 1]])
        pix[rows] = uv
    pix += rng.normal(size=(n, 2)) * (pixel_sigma * scale)[:, None]
    return obs[:, 0].copy(), obs[:, 1].copy(), pix, scale


def gate_tracks(bundle: GroundTruthBundle, obs_camera, obs_point,
                max_angle_deg: Optional[float]) -> np.ndarray:
    """Mask of observations a feature matcher would link into one track.

    Descriptors survive only moderate viewpoint change, so each track keeps
    the cameras whose viewing ray lies within ``max_angle_deg`` of its most
    central ray (the one closest to the mean ray direction). Every track
    keeps at least its two most central cameras. ``None`` keeps everything.
    """
    obs_camera, obs_point = np.asarray(obs_camera), np.asarray(obs_point)
    keep = np.ones(len(obs_camera), dtype=bool)
    if max_angle_deg is None:
        return keep
    centers = np.array([c.center for c in bundle.cameras])
    ray = centers[obs_camera] - bundle.points[obs_point]
    ray /= np.linalg.norm(ray, axis=1)[:, None]
    n = len(bundle.points)
    mean = np.zeros((n, 3))
    np.add.at(mean, obs_point, ray)
    mean /= np.maximum(np.linalg.norm(mean, axis=1), 1e-300)[:, None]
    centrality = np.einsum("ij,ij->i", ray, mean[obs_point])
    order = np.lexsort((-centrality, obs_point))
    first = np.r_[True, obs_point[order][1:] != obs_point[order][:-1]]
    anchor = np.zeros((n, 3))
    anchor[obs_point[order][first]] = ray[order][first]
    cos_lim = math.cos(math.radians(max_angle_deg))
    keep = np.einsum("ij,ij->i", ray, anchor[obs_point]) >= cos_lim
    rank = np.empty(len(order), dtype=np.int64)
    starts = np.flatnonzero(first)
    rank[order] = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    return keep | (rank < 2)


def scan_visible_tracks(bundle: GroundTruthBundle, scan: SimulatedScan,
                        max_range: float = 30.0) -> np.ndarray:
    wp = bundle.world_points
    d = np.linalg.norm(wp - scan.pose.translation, axis=1)
    cand = np.flatnonzero((d > 0.3) & (d < max_range))
    vis = bundle.caster.visible(scan.pose.translation, wp[cand])
    return cand[vis]


def aerial_track_mask(cameras: Sequence[CameraView], obs_camera, obs_point,
                      n_points: int) -> np.ndarray:
    """Tracks observed by at least one aerial camera."""
    aerial = np.array([c.label == "captured-aerial" for c in cameras], dtype=bool)
    out = np.zeros(n_points, dtype=bool)
    out[np.asarray(obs_point)[aerial[np.asarray(obs_camera)]]] = True
    return out


def reference_region(spec: SceneSpec) -> str:
    return "indoor" if spec.ceiling else "outdoor"


def pick_references(bundle: GroundTruthBundle, scans: Sequence[SimulatedScan], n_reference: int,
                    rng: np.random.Generator, track_views: Optional[np.ndarray] = None,
                    min_views: int = 0):
    """Exact reference pairs, spread evenly over the scans.

    With ``track_views`` given, only tracks seen in at least ``min_views``
    images qualify; if a scan has too few of those, its best-observed
    remaining tracks make up the difference. Returns
    ``(scan, track, laser, used)`` where ``used`` marks the chosen tracks so
    that matches can avoid them.
    """
    wp = bundle.world_points
    used = np.zeros(len(wp), dtype=bool)
    per_scan = int(math.ceil(n_reference / max(1, len(scans))))
    scan_ids, tracks, laser = [], [], []
    for i, scan in enumerate(scans):
        cand = scan_visible_tracks(bundle, scan)
        cand = rng.permutation(cand[~used[cand]])
        if track_views is not None:
            views = track_views[cand]
            good = views >= min_views
            rest = cand[~good][np.argsort(-views[~good], kind="stable")]
            cand = np.concatenate([cand[good], rest])
        cand = cand[:per_scan]
        used[cand] = True
        scan_ids += [i] * len(cand)
        tracks += cand.tolist()
        laser.append(scan.pose.inverse().apply(wp[cand]).reshape(-1, 3))
    return (np.asarray(scan_ids, dtype=np.int64), np.asarray(tracks, dtype=np.int64),
            np.vstack(laser) if laser else np.zeros((0, 3)), used)


def simulate_pairs(bundle: GroundTruthBundle, scans: Sequence[SimulatedScan], aerial_tracks,
                   point_sigma: float, outlier_fraction: float, pairs_per_scan: int = 150,
                   n_reference: int = 40, rng: Optional[np.random.Generator] = None):
    """Oracle 3D scan-to-track pairs plus exact reference pairs.

    Laser sides carry Gaussian noise of ``point_sigma``; a fraction of them is
    replaced by labeled outliers drawn uniformly in the scene box (rejecting
    draws closer than ``3 * point_sigma`` to the truth). Reference pairs are
    exact and disjoint from the matched tracks. Returns a dict of pair and
    reference arrays.
    """
    rng = rng if rng is not None else np.random.default_rng(bundle.spec.seed + 7)
    lo, hi = bundle.box()
    wp = bundle.world_points
    ref_scan, ref_point, ref_laser, used = pick_references(bundle, scans, n_reference, rng)
    rows = {k: [] for k in ("scan", "chan", "laser", "point", "inl")}
    for i, scan in enumerate(scans):
        inv = scan.pose.inverse()
        cand = scan_visible_tracks(bundle, scan)
        chosen = rng.permutation(cand[~used[cand]])[:pairs_per_scan]
        used[chosen] = True
        n_out = int(round(outlier_fraction * len(chosen)))
        out_mask = np.zeros(len(chosen), dtype=bool)
        out_mask[rng.permutation(len(chosen))[:n_out]] = True
        laser = inv.apply(wp[chosen]).reshape(-1, 3) + rng.normal(0.0, point_sigma, (len(chosen), 3))
        for r in np.flatnonzero(out_mask):
            while True:
                w = rng.uniform(lo, hi)
                if np.linalg.norm(w - wp[chosen[r]]) > 3 * max(point_sigma, 1e-6) * math.sqrt(3):
                    break
            laser[r] = inv.apply(w)
        chan = np.where(aerial_tracks[chosen] & (rng.random(len(chosen)) < 0.5), 1, 0)
        rows["scan"] += [i] * len(chosen)
        rows["chan"] += list(chan)
        rows["laser"] += list(laser)
        rows["point"] += list(chosen)
        rows["inl"] += list(~out_mask)
    n3 = len(rows["scan"])
    return {
        "pair_scan": np.asarray(rows["scan"], dtype=np.int64),
        "pair_channel": np.asarray(rows["chan"], dtype=np.int64),
        "pair_laser": np.asarray(rows["laser"], dtype=np.float64).reshape(n3, 3),
        "pair_point": np.asarray(rows["point"], dtype=np.int64),
        "pair_anchor": np.zeros((n3, 3)),
        "pair_inlier": np.asarray(rows["inl"], dtype=bool),
        "ref_scan": ref_scan,
        "ref_point": ref_point,
        "ref_laser": ref_laser,
        "ref_region": np.full(len(ref_scan), reference_region(bundle.spec)),
    }


def simulate_matches(bundle: GroundTruthBundle, scans: Sequence[SimulatedScan],
                     pixel_sigma: Optional[float] = None, point_sigma: Optional[float] = None,
                     outlier_fraction: Optional[float] = None, pairs_per_scan: int = 150,
                     n_reference: int = 40, seed: Optional[int] = None) -> CorrespondenceSet:
    """Oracle matches: noisy 2D observations plus 3D scan-to-track pairs
    (see :func:`simulate_pairs`)."""
    spec = bundle.spec
    pixel_sigma = spec.pixel_sigma if pixel_sigma is None else pixel_sigma
    point_sigma = spec.point_sigma if point_sigma is None else point_sigma
    outlier_fraction = spec.outlier_fraction if outlier_fraction is None else outlier_fraction
    rng = np.random.default_rng(spec.seed + 7 if seed is None else seed)

    cam_idx, pt_idx, pix, fscale = noisy_observations(bundle, pixel_sigma, rng)
    aerial = aerial_track_mask(bundle.cameras, cam_idx, pt_idx, len(bundle.points))
    pairs = simulate_pairs(bundle, scans, aerial, point_sigma, outlier_fraction, pairs_per_scan,
                           n_reference, rng)
    return CorrespondenceSet(obs_camera=cam_idx, obs_point=pt_idx, obs_pixel=pix,
                             obs_scale=fscale, **pairs)


# ----------------------------------------------------------------------------
# structure from motion stand-in


def simulate_sfm(bundle: GroundTruthBundle, obs_camera, obs_point, obs_pixel, obs_scale,
                 focal_error: float = 0.003, rotation_sigma_deg: float = 0.3,
                 translation_sigma: float = 0.02, point_sigma: float = 0.02,
                 rng: Optional[np.random.Generator] = None, max_iters: int = 100,
                 tol: float = 1e-8):
    """Imperfect SfM reconstruction from noisy 2D observations.

    Focal lengths are mis-calibrated by ``1 + focal_error``; the true poses
    and points are perturbed and then refined by reprojection-only bundle
    adjustment with the same gauge as the merge. Returns
    ``(cameras, points, report)``.
    """
    rng = rng if rng is not None else np.random.default_rng(bundle.spec.seed + 11)
    cams = bundle.cameras
    intr = np.array([c.intrinsics.as_array() for c in cams])
    intr[:, :2] *= 1.0 + focal_error
    prob = MergeProblem(
        intrinsics=intr, cam_R=np.array([c.pose.rotation for c in cams]),
        cam_t=np.array([c.pose.translation for c in cams]), points=bundle.points.copy(),
        scan_R=np.zeros((0, 3, 3)), scan_t=np.zeros((0, 3)), scale=1.0,
        obs_camera=obs_camera, obs_point=obs_point, obs_pixel=obs_pixel, obs_scale=obs_scale,
        pair_scan=np.zeros(0, np.int64), pair_laser=np.zeros((0, 3)),
        pair_point=np.zeros(0, np.int64), pair_anchor=np.zeros((0, 3)), pair_range=np.zeros(0))
    gauge = make_layout(prob).gauge_camera
    s = bundle.spec.sfm_scale
    for j in range(1, prob.n_cameras):
        if j == gauge:
            continue
        prob.cam_R[j] = so3_exp(rng.normal(size=3) * math.radians(rotation_sigma_deg)) @ prob.cam_R[j]
        prob.cam_t[j] += rng.normal(size=3) * translation_sigma * s
    prob.points += rng.normal(size=prob.points.shape) * point_sigma * s
    report, out = solve(prob, max_iters=max_iters, tol=tol)
    views = [CameraView(CameraIntrinsics(*out.intrinsics[j], c.intrinsics.width,
                                         c.intrinsics.height),
                        RigidPose(out.cam_R[j], out.cam_t[j]), c.label)
             for j, c in enumerate(cams)]
    return views, out.points, report


def ground_truth_cloud(bundle: GroundTruthBundle, n: int = 300_000,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Area-uniform surface samples of the scene in the SfM frame."""
    rng = rng if rng is not None else np.random.default_rng(bundle.spec.seed + 13)
    pts, _ = bundle.mesh.sample_surface(n, rng)
    return bundle.spec.sfm_scale * pts
