"""Synthetic images and depth maps rendered from colored laser scans.

Ground views come from a virtual cube of six 90 degree cameras centered at
the scan origin. Aerial views reuse captured aerial cameras. Pixel ``(i, j)``
covers ``[i, i + 1) x [j, j + 1)``; its center is ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    CameraView,
    ColoredPointCloud,
    RigidPose,
    Sim3Transform,
    look_at_rotation,
)

DEFAULT_CUBE_RES = 512
FULL_CUBE_RES = 3840
DEFAULT_FILL_RADIUS = 3
DEFAULT_GRAD_THRESH = 0.05
EDGE_DILATION = 2
NO_DEPTH = 0.0

FACE_AXES = {
    "+x": (1.0, 0.0, 0.0),
    "-x": (-1.0, 0.0, 0.0),
    "+y": (0.0, 1.0, 0.0),
    "-y": (0.0, -1.0, 0.0),
    "+z": (0.0, 0.0, 1.0),
    "-z": (0.0, 0.0, -1.0),
}


class SynthesisError(ValueError):
    pass


class DisjointViewError(SynthesisError):
    """No cloud point lands inside the image."""


class NoDepthError(SynthesisError):
    pass


class UnreliableDepthError(SynthesisError):
    pass


@dataclass(frozen=True, eq=False)
class SynthImage:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) camera-frame depth, NO_DEPTH where empty
    camera: CameraView
    scan_id: int = 0
    seed: Optional[np.ndarray] = None  # pixels hit directly by a point
    frame: Sim3Transform = field(default_factory=Sim3Transform.identity)

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise SynthesisError("rgb and depth buffers differ in size")
        for a in (self.rgb, self.depth) + ((self.seed,) if self.seed is not None else ()):
            a.setflags(write=False)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.depth != NO_DEPTH


@dataclass(frozen=True)
class CubeRig:
    center: np.ndarray
    views: tuple[CameraView, ...]
    resolution: int
    names: tuple[str, ...] = tuple(FACE_AXES)


def build_cube_rig(center=(0.0, 0.0, 0.0), resolution: int = DEFAULT_CUBE_RES) -> CubeRig:
    if resolution < 2:
        raise ValueError("cube resolution must be at least 2")
    c = np.asarray(center, dtype=np.float64)
    half = resolution / 2.0
    intr = CameraIntrinsics(half, half, half, half, resolution, resolution)
    views = []
    for axis in FACE_AXES.values():
        R = look_at_rotation(np.array(axis))
        views.append(CameraView(intr, RigidPose(R, -R @ c), "virtual"))
    return CubeRig(c, tuple(views), resolution)


def _splat(cloud: ColoredPointCloud, cam: CameraView):
    uv, front = cam.project(cloud.points)
    inside = front & cam.in_image(uv)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        raise DisjointViewError("no point projects into the view")
    w = cam.intrinsics.width
    px = np.floor(uv[idx]).astype(np.int64)
    lin = px[:, 1] * w + px[:, 0]
    z = cam.depth(cloud.points[idx])
    # nearest point per pixel; equal depths go to the lower point index
    order = np.lexsort((idx, z, lin))
    lin, z, idx = lin[order], z[order], idx[order]
    first = np.r_[True, lin[1:] != lin[:-1]]
    return lin[first], z[first], idx[first]


def synthesize_view(cloud: ColoredPointCloud, cam: CameraView, fill_radius: float = DEFAULT_FILL_RADIUS,
                    scan_id: int = 0, frame: Optional[Sim3Transform] = None) -> SynthImage:
    """Z-buffered one-pixel splats followed by bounded nearest-neighbor fill.

    ``cam`` must live in the cloud's frame; ``frame`` maps that frame to the
    world and is only used by :func:`pixel_to_point`.
    """
    if len(cloud) == 0:
        raise SynthesisError("empty cloud")
    k = cam.intrinsics
    h, w = k.height, k.width
    lin, z, idx = _splat(cloud, cam)
    depth = np.zeros(h * w)
    rgb = np.zeros((h * w, 3), dtype=np.uint8)
    depth[lin] = z
    rgb[lin] = cloud.colors[idx]
    seed = np.zeros(h * w, dtype=bool)
    seed[lin] = True
    depth, rgb, seed = depth.reshape(h, w), rgb.reshape(h, w, 3), seed.reshape(h, w)

    if fill_radius > 0:
        dist, (ii, jj) = ndimage.distance_transform_edt(~seed, return_indices=True)
        fill = (~seed) & (dist <= fill_radius)
        depth[fill] = depth[ii[fill], jj[fill]]
        rgb[fill] = rgb[ii[fill], jj[fill]]
    return SynthImage(rgb, depth, cam, scan_id, seed, frame or Sim3Transform.identity())


def render_cube(cloud: ColoredPointCloud, rig: CubeRig, fill_radius: float = DEFAULT_FILL_RADIUS,
                scan_id: int = 0, frame: Optional[Sim3Transform] = None) -> list[Optional[SynthImage]]:
    """One image per face; ``None`` for faces that see no point."""
    out = []
    for cam in rig.views:
        try:
            out.append(synthesize_view(cloud, cam, fill_radius, scan_id, frame))
        except DisjointViewError:
            out.append(None)
    return out


def depth_edge_mask(img: SynthImage, grad_thresh: float = DEFAULT_GRAD_THRESH,
                    dilation: int = EDGE_DILATION) -> np.ndarray:
    """Pixels whose depth is missing or near a depth discontinuity."""
    if grad_thresh <= 0:
        raise ValueError("grad_thresh must be positive")
    d = img.depth
    valid = img.valid
    h, w = d.shape
    bad = ~valid
    pad_d = np.pad(d, 1)
    pad_v = np.pad(valid, 1)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nd = pad_d[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            nv = pad_v[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            bad |= valid & nv & (np.abs(nd - d) > grad_thresh)
    if dilation > 0:
        bad = ndimage.binary_dilation(bad, structure=np.ones((2 * dilation + 1,) * 2, dtype=bool))
    return bad


def pixel_to_point(img: SynthImage, pixel, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """World point seen at a continuous pixel position, using the depth
    stored for the pixel containing it."""
    u, v = float(pixel[0]), float(pixel[1])
    i, j = math.floor(u), math.floor(v)
    if not (0 <= i < img.width and 0 <= j < img.height):
        raise IndexError(f"pixel {pixel} outside the image")
    z = img.depth[j, i]
    if z == NO_DEPTH:
        raise NoDepthError(f"no depth at pixel {pixel}")
    if mask is not None and mask[j, i]:
        raise UnreliableDepthError(f"depth at pixel {pixel} is near a discontinuity")
    p = img.camera.unproject([u, v], [z])[0]
    return img.frame.apply(p)


def pixels_to_points(img: SynthImage, pixels, mask: Optional[np.ndarray] = None):
    """Vectorized :func:`pixel_to_point`; returns ``(points, ok)`` with nan rows
    for pixels that are empty, masked or out of bounds."""
    uv = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    ij = np.floor(uv).astype(np.int64)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < img.width) & (ij[:, 1] >= 0) & (ij[:, 1] < img.height)
    z = np.zeros(len(uv))
    z[ok] = img.depth[ij[ok, 1], ij[ok, 0]]
    ok &= z != NO_DEPTH
    if mask is not None:
        ok[ok] &= ~mask[ij[ok, 1], ij[ok, 0]]
    out = np.full((len(uv), 3), np.nan)
    if ok.any():
        out[ok] = img.frame.apply(img.camera.unproject(uv[ok], z[ok]))
    return out, ok


def visible_count(points: np.ndarray, cam: CameraView) -> np.ndarray:
    uv, front = cam.project(points)
    return front & cam.in_image(uv)


def _axis_angle(a: np.ndarray, b: np.ndarray) -> float:
    return math.acos(max(-1.0, min(1.0, float(a @ b))))


def select_aerial_views(scan: ColoredPointCloud | np.ndarray, aerial_cams: Sequence[CameraView],
                        k: int = 5) -> list[int]:
    """Greedy choice of up to ``k`` aerial cameras covering a scan.

    The first pick sees the most scan points. Later picks maximize newly
    seen points times the smallest optical-axis angle to any chosen camera;
    when that is zero for everyone, total visibility replaces new visibility.
    Selection stops early once no camera scores above zero. Returns indices.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not aerial_cams:
        raise ValueError("no aerial cameras")
    pts = scan.points if isinstance(scan, ColoredPointCloud) else np.asarray(scan, float)
    vis = [visible_count(pts, c) for c in aerial_cams]
    counts = [int(v.sum()) for v in vis]
    if max(counts) == 0:
        raise SynthesisError("no aerial camera sees the scan")
    chosen = [int(np.argmax(counts))]
    seen = vis[chosen[0]].copy()
    while len(chosen) < min(k, len(aerial_cams)):
        rest = [i for i in range(len(aerial_cams)) if i not in chosen]
        sep = {i: min(_axis_angle(aerial_cams[i].axis, aerial_cams[c].axis) for c in chosen)
               for i in rest}
        new = {i: int(np.count_nonzero(vis[i] & ~seen)) for i in rest}
        score = {i: new[i] * sep[i] for i in rest}
        if max(score.values()) <= 0:
            score = {i: counts[i] * sep[i] for i in rest}
            if max(score.values()) <= 0:
                break
        best = max(rest, key=lambda i: (score[i], -i))
        chosen.append(best)
        seen |= vis[best]
    return chosen


def matching_partners(view: CameraView, cams: Sequence[CameraView], max_distance: float = 5.0,
                      max_angle_deg: float = 45.0) -> list[int]:
    """Indices of cameras close enough in position and viewing direction to
    be matched against ``view``. Both limits are inclusive."""
    lim = math.radians(max_angle_deg) + 1e-12  # exact limits survive acos rounding
    out = []
    for i, c in enumerate(cams):
        if (np.linalg.norm(c.center - view.center) <= max_distance
                and _axis_angle(c.axis, view.axis) <= lim):
            out.append(i)
    return out
