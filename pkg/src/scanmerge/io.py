"""File formats: PLY meshes and clouds, camera JSON, CSV measurements, images."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from plyfile import PlyData, PlyElement
from PIL import Image

from .geometry import CameraIntrinsics, CameraView, ColoredPointCloud, RigidPose, Sim3Transform, TriMesh


def _ply_write(path, elements: Sequence[PlyElement], binary: bool) -> None:
    PlyData(list(elements), text=not binary, byte_order="<").write(str(path))


def write_mesh_ply(path, mesh: TriMesh, binary: bool = True, colors: Optional[np.ndarray] = None) -> None:
    v = np.empty(len(mesh.vertices), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    v["x"], v["y"], v["z"] = mesh.vertices.T
    fdt = [("vertex_indices", "i4", (3,))]
    if colors is not None:
        fdt += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    f = np.empty(mesh.n_facets, dtype=fdt)
    f["vertex_indices"] = mesh.facets
    if colors is not None:
        f["red"], f["green"], f["blue"] = np.asarray(colors, dtype=np.uint8).T
    _ply_write(path, [PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")], binary)


def read_mesh_ply(path) -> TriMesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    faces = ply["face"].data["vertex_indices"]
    facets = np.array([np.asarray(f, dtype=np.int64) for f in faces]).reshape(-1, 3)
    return TriMesh(verts, facets)


def write_cloud_ply(path, cloud: ColoredPointCloud, binary: bool = True) -> None:
    dt = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.ranges is not None:
        dt.append(("range", "f8"))
    a = np.empty(len(cloud), dtype=dt)
    a["x"], a["y"], a["z"] = cloud.points.T
    a["red"], a["green"], a["blue"] = cloud.colors.T
    if cloud.ranges is not None:
        a["range"] = cloud.ranges
    _ply_write(path, [PlyElement.describe(a, "vertex")], binary)


def read_cloud_ply(path) -> ColoredPointCloud:
    v = PlyData.read(str(path))["vertex"]
    names = v.data.dtype.names
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if "red" in names:
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
    else:
        colors = np.full((len(pts), 3), 128, dtype=np.uint8)
    ranges = np.asarray(v["range"], dtype=np.float64) if "range" in names else None
    return ColoredPointCloud(pts, colors, ranges)


def write_points_ply(path, points: np.ndarray, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    write_cloud_ply(path, ColoredPointCloud(pts, np.full((len(pts), 3), 128, np.uint8)), binary)


def read_points_ply(path) -> np.ndarray:
    return read_cloud_ply(path).points


# -- JSON -------------------------------------------------------------------


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def camera_to_dict(cam: CameraView) -> dict:
    k = cam.intrinsics
    return {
        "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "w": k.width, "h": k.height,
        "R": [float(x) for x in cam.pose.rotation.ravel()],
        "t": [float(x) for x in cam.pose.translation],
        "label": cam.label,
    }


def camera_from_dict(d: dict) -> CameraView:
    intr = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            int(d["w"]), int(d["h"]))
    pose = RigidPose(np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                     np.asarray(d["t"], dtype=np.float64))
    return CameraView(intr, pose, d.get("label", "captured-ground"))


def write_cameras_json(path, cams: Iterable[CameraView]) -> None:
    write_json(path, [camera_to_dict(c) for c in cams])


def read_cameras_json(path) -> list[CameraView]:
    return [camera_from_dict(d) for d in read_json(path)]


def write_transforms_json(path, transforms: Sequence[Sim3Transform]) -> None:
    write_json(path, [t.to_dict() for t in transforms])


def read_transforms_json(path) -> list[Sim3Transform]:
    return [Sim3Transform.from_dict(d) for d in read_json(path)]


# -- CSV --------------------------------------------------------------------

TRACK_FIELDS = ("camera", "point", "u", "v", "scale")
PAIR_FIELDS = ("scan", "channel", "lx", "ly", "lz", "point", "ax", "ay", "az", "range", "inlier")
REFERENCE_FIELDS = ("scan", "point", "sx", "sy", "sz", "lx", "ly", "lz", "region")


def write_csv(path, fields: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def read_csv(path, fields: Sequence[str]) -> dict:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(fields) - set(rd.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(rd)
    return {f: [r[f] for r in rows] for f in fields}


def write_tracks_csv(path, camera, point, pixel, scale) -> None:
    pixel = np.asarray(pixel, dtype=np.float64).reshape(-1, 2)
    rows = zip(np.asarray(camera).tolist(), np.asarray(point).tolist(), pixel[:, 0].tolist(),
               pixel[:, 1].tolist(), np.asarray(scale, dtype=np.float64).tolist())
    write_csv(path, TRACK_FIELDS, rows)


def read_tracks_csv(path) -> dict:
    c = read_csv(path, TRACK_FIELDS)
    return {
        "obs_camera": np.array(c["camera"], dtype=np.int64),
        "obs_point": np.array(c["point"], dtype=np.int64),
        "obs_pixel": np.stack([np.array(c["u"], float), np.array(c["v"], float)], 1).reshape(-1, 2),
        "obs_scale": np.array(c["scale"], dtype=np.float64),
    }


def write_pairs_csv(path, scan, channel, laser, point, anchor, ranges, inlier) -> None:
    laser = np.asarray(laser, dtype=np.float64).reshape(-1, 3)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1, 3)
    rows = (
        [int(scan[q]), int(channel[q]), *laser[q].tolist(), int(point[q]), *anchor[q].tolist(),
         float(ranges[q]), int(bool(inlier[q]))]
        for q in range(len(laser))
    )
    write_csv(path, PAIR_FIELDS, rows)


def read_pairs_csv(path) -> dict:
    c = read_csv(path, PAIR_FIELDS)
    f = lambda *k: np.stack([np.array(c[x], float) for x in k], 1).reshape(-1, len(k))  # noqa: E731
    return {
        "pair_scan": np.array(c["scan"], dtype=np.int64),
        "pair_channel": np.array(c["channel"], dtype=np.int64),
        "pair_laser": f("lx", "ly", "lz"),
        "pair_point": np.array(c["point"], dtype=np.int64),
        "pair_anchor": f("ax", "ay", "az"),
        "pair_range": np.array(c["range"], dtype=np.float64),
        "pair_inlier": np.array(c["inlier"], dtype=np.int64).astype(bool),
    }


def write_references_csv(path, scan, point, sfm, laser, region) -> None:
    sfm = np.asarray(sfm, dtype=np.float64).reshape(-1, 3)
    laser = np.asarray(laser, dtype=np.float64).reshape(-1, 3)
    rows = ([int(scan[q]), int(point[q]), *sfm[q].tolist(), *laser[q].tolist(), str(region[q])]
            for q in range(len(laser)))
    write_csv(path, REFERENCE_FIELDS, rows)


def read_references_csv(path) -> dict:
    c = read_csv(path, REFERENCE_FIELDS)
    f = lambda *k: np.stack([np.array(c[x], float) for x in k], 1).reshape(-1, len(k))  # noqa: E731
    return {
        "scan": np.array(c["scan"], dtype=np.int64),
        "point": np.array(c["point"], dtype=np.int64),
        "sfm": f("sx", "sy", "sz"),
        "laser": f("lx", "ly", "lz"),
        "region": np.array(c["region"]),
    }


# -- images -----------------------------------------------------------------


def write_png(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    Image.fromarray(np.ascontiguousarray(a)).save(str(path))


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(str(path)))


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows stored bottom to top."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dt).reshape(h, w)
    return data[::-1].astype(np.float32)
