"""Geometric primitives shared across the toolkit.

Conventions
-----------
* Points are ``(3,)`` or ``(N, 3)`` float64 arrays in meters.
* Rotations are ``3x3`` orthonormal matrices with determinant +1.
* Camera poses are world-to-camera: ``x_cam = R @ x_world + t``. The camera
  looks along its +z axis, +x to the right and +y down the image.
* Pixel coordinates are continuous; pixel ``(i, j)`` covers
  ``[i, i + 1) x [j, j + 1)`` so its center sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
LABELS = ("captured-ground", "captured-aerial", "virtual")


class GeometryError(ValueError):
    """Invalid geometric input."""


class InvalidMeshError(GeometryError):
    pass


def _as_points(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("rotation is not orthonormal with det +1")
    return R


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack) from rotation vector(s)."""
    return Rotation.from_rotvec(np.asarray(phi, dtype=np.float64)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation in radians."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R) - 1.0) / 2.0
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 stays accurate near 0 where arccos loses half the digits
    return float(np.arctan2(np.linalg.norm(v) / 2.0, c))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; accepts ``(3,)`` or ``(N, 3)``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = _as_points(self.translation).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "translation", t)

    def apply(self, p) -> np.ndarray:
        return _as_points(p) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        """``-R^T t``; the camera center when the pose is world-to-camera."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform ``x -> s R x + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        s = float(self.scale)
        if not (np.isfinite(s) and s > 0):
            raise GeometryError(f"scale must be positive and finite, got {s}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        t = _as_points(self.translation).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    @classmethod
    def from_rigid(cls, pose: RigidPose, scale: float = 1.0) -> "Sim3Transform":
        return cls(scale, pose.rotation, pose.translation)

    def apply(self, p) -> np.ndarray:
        return self.scale * (_as_points(p) @ self.rotation.T) + self.translation

    def inverse(self) -> "Sim3Transform":
        Rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return Sim3Transform(inv_s, Rt, -inv_s * (Rt @ self.translation))

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """``self ∘ other``: apply ``other`` first."""
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def __matmul__(self, other: "Sim3Transform") -> "Sim3Transform":
        return self.compose(other)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sim3Transform":
        return cls(d["scale"], np.reshape(d["rotation"], (3, 3)), d["translation"])


def apply_sim3(t: Sim3Transform, p) -> np.ndarray:
    return t.apply(p)


def compose_sim3(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    return a.compose(b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: RigidPose
    label: str = "captured-ground"

    def __post_init__(self):
        if self.label not in LABELS:
            raise GeometryError(f"unknown camera label {self.label!r}")

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    @property
    def axis(self) -> np.ndarray:
        """Optical axis direction in world coordinates."""
        return self.pose.rotation[2].copy()

    def to_camera(self, p) -> np.ndarray:
        return self.pose.apply(p)

    def project(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns ``(uv, in_front)``.

        Points with nonpositive camera depth get ``nan`` pixels and
        ``in_front == False``.
        """
        xc = np.atleast_2d(self.to_camera(p))
        z = xc[:, 2]
        in_front = z > 0
        uv = np.full((len(xc), 2), np.nan)
        k = self.intrinsics
        zf = z[in_front]
        uv[in_front, 0] = k.fx * xc[in_front, 0] / zf + k.cx
        uv[in_front, 1] = k.fy * xc[in_front, 1] / zf + k.cy
        return uv, in_front

    def depth(self, p) -> np.ndarray:
        return np.atleast_2d(self.to_camera(p))[:, 2]

    def unproject(self, uv, depth) -> np.ndarray:
        """World points at camera-frame ``depth`` along pixel rays."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        d = np.asarray(depth, dtype=np.float64).reshape(-1)
        k = self.intrinsics
        xc = np.empty((len(uv), 3))
        xc[:, 0] = (uv[:, 0] - k.cx) / k.fx * d
        xc[:, 1] = (uv[:, 1] - k.cy) / k.fy * d
        xc[:, 2] = d
        return self.pose.inverse().apply(xc)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        k = self.intrinsics
        with np.errstate(invalid="ignore"):
            return ((uv[:, 0] >= 0) & (uv[:, 0] < k.width)
                    & (uv[:, 1] >= 0) & (uv[:, 1] < k.height))


def project_point(cam: CameraView, p) -> Optional[tuple[float, float]]:
    """Pixel of a single world point, or ``None`` when it is behind the camera."""
    uv, ok = cam.project(np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def look_at_rotation(forward: np.ndarray, down_hint=(0.0, 0.0, -1.0)) -> np.ndarray:
    """World-to-camera rotation whose optical axis is ``forward``.

    The image y axis is aligned as closely as possible with ``down_hint``.
    """
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    d = np.asarray(down_hint, dtype=np.float64)
    y = d - (d @ z) * z
    if np.linalg.norm(y) < 1e-9:
        alt = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        y = alt - (alt @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z])


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with cached facet centers and areas."""

    vertices: np.ndarray
    facets: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.facets, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidMeshError("vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidMeshError("facet index out of range")
        tri = v[f]
        areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if np.any(areas <= 0):
            bad = int(np.flatnonzero(areas <= 0)[0])
            raise InvalidMeshError(f"facet {bad} is degenerate")
        centers = tri.mean(axis=1)
        for arr in (v, f, areas, centers):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "facets", f)
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "centers", centers)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    def triangles(self) -> np.ndarray:
        """``(M, 3, 3)`` facet corner coordinates."""
        return self.vertices[self.facets]

    @cached_property
    def center_tree(self) -> cKDTree:
        return cKDTree(self.centers)

    def transformed(self, t: Sim3Transform) -> "TriMesh":
        return TriMesh(t.apply(self.vertices), self.facets)

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform surface samples; returns ``(points, facet_ids)``."""
        p = self.areas / self.areas.sum()
        fid = rng.choice(self.n_facets, size=n, p=p)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        tri = self.triangles()[fid]
        pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
               + (r1 * r2)[:, None] * tri[:, 2])
        return pts, fid


@dataclass(frozen=True, eq=False)
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray
    ranges: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        c = np.ascontiguousarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(p) != len(c):
            raise GeometryError("points and colors differ in length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "colors", c)
        if self.ranges is not None:
            r = np.ascontiguousarray(self.ranges, dtype=np.float64).reshape(-1)
            if len(r) != len(p) or np.any(r < 0):
                raise GeometryError("ranges must be nonnegative, one per point")
            object.__setattr__(self, "ranges", r)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: Sim3Transform) -> "ColoredPointCloud":
        ranges = None if self.ranges is None else self.ranges * t.scale
        return ColoredPointCloud(t.apply(self.points), self.colors, ranges)


PARALLEL_TOL = 1e-12
BARY_EPS = 1e-12


def ray_triangle_intersect(origin, direction, tri) -> Optional[float]:
    """Hit distance of a ray against one triangle (edges count as hits).

    Returns ``None`` on a miss. Raises :class:`InvalidMeshError` for a
    degenerate triangle.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    v0, v1, v2 = np.asarray(tri, dtype=np.float64)
    e1 = v1 - v0
    e2 = v2 - v0
    n = np.cross(e1, e2)
    nn = np.linalg.norm(n)
    if nn <= 0:
        raise InvalidMeshError("degenerate triangle")
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) <= PARALLEL_TOL * nn:
        return None
    inv = 1.0 / det
    s = o - v0
    u = (s @ p) * inv
    if u < -BARY_EPS or u > 1 + BARY_EPS:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < -BARY_EPS or u + v > 1 + BARY_EPS:
        return None
    t = (e2 @ q) * inv
    if t < 0:
        return None
    return float(t)
