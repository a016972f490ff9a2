"""Fine merging of SfM and laser scans by a generalized bundle adjustment.

Unknowns are camera poses (world-to-camera), SfM points, one rigid alignment
per scan and one global laser-to-SfM scale. The cost is

    sum rho(|r_2d|^2) + omega * sum rho(|r_3d|^2)

with whitened reprojection residuals ``r_2d`` and whitened space residuals
``r_3d = (s R_i X_laser + t_i - X_sfm) / sigma``, and ``rho`` the Huber
function on the residual norm.

Parameterization: rotations take left increments ``R <- Exp(phi) R``; the
scale is optimized as ``log s``. The gauge is fixed by freezing the first
camera and the component of one far camera's translation that a joint
rescaling about the first camera center would change most.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import CameraIntrinsics, CameraView, RigidPose, Sim3Transform, skew, so3_exp

log = logging.getLogger(__name__)


class InvalidProblemError(ValueError):
    pass


class MergeError(RuntimeError):
    pass


@dataclass(frozen=True)
class CovarianceModel:
    """Isotropic measurement covariances.

    ``Sigma_2d = (pixel_sigma * feature_scale ** feature_scale_exponent)^2 I``
    and ``Sigma_3d = (laser_sigma + range_coeff * range)^2 I``.
    """

    pixel_sigma: float = 1.0
    feature_scale_exponent: float = 1.0
    laser_sigma: float = 1e-3
    range_coeff: float = 1e-5

    def __post_init__(self):
        if min(self.pixel_sigma, self.feature_scale_exponent, self.laser_sigma,
               self.range_coeff) <= 0:
            raise ValueError("covariance parameters must be positive")

    def pixel_std(self, feature_scale: np.ndarray) -> np.ndarray:
        return self.pixel_sigma * np.asarray(feature_scale, float) ** self.feature_scale_exponent

    def laser_std(self, ranges: np.ndarray) -> np.ndarray:
        return self.laser_sigma + self.range_coeff * np.asarray(ranges, float)


@dataclass
class MergeProblem:
    """Parameters and measurements of the joint optimization.

    Space observations with ``pair_point[q] >= 0`` link to the live SfM point;
    ``-1`` anchors them to the fixed ``pair_anchor[q]``.
    """

    intrinsics: np.ndarray  # (C, 4) fx fy cx cy, never optimized
    cam_R: np.ndarray  # (C, 3, 3)
    cam_t: np.ndarray  # (C, 3)
    points: np.ndarray  # (P, 3)
    scan_R: np.ndarray  # (S, 3, 3)
    scan_t: np.ndarray  # (S, 3)
    scale: float
    obs_camera: np.ndarray
    obs_point: np.ndarray
    obs_pixel: np.ndarray
    obs_scale: np.ndarray
    pair_scan: np.ndarray
    pair_laser: np.ndarray
    pair_point: np.ndarray
    pair_anchor: np.ndarray
    pair_range: np.ndarray
    pair_channel: np.ndarray = None
    omega: float = 1.0
    huber_delta: float = 1.0
    covariance: CovarianceModel = field(default_factory=CovarianceModel)
    fixed_cameras: tuple = (0,)
    fix_scale_gauge: bool = True

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(-1, 4)
        self.cam_R = np.asarray(self.cam_R, dtype=np.float64).reshape(-1, 3, 3)
        self.cam_t = np.asarray(self.cam_t, dtype=np.float64).reshape(-1, 3)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.scan_R = np.asarray(self.scan_R, dtype=np.float64).reshape(-1, 3, 3)
        self.scan_t = np.asarray(self.scan_t, dtype=np.float64).reshape(-1, 3)
        self.obs_camera = np.asarray(self.obs_camera, dtype=np.int64)
        self.obs_point = np.asarray(self.obs_point, dtype=np.int64)
        self.obs_pixel = np.asarray(self.obs_pixel, dtype=np.float64).reshape(-1, 2)
        self.obs_scale = np.asarray(self.obs_scale, dtype=np.float64)
        self.pair_scan = np.asarray(self.pair_scan, dtype=np.int64)
        self.pair_laser = np.asarray(self.pair_laser, dtype=np.float64).reshape(-1, 3)
        self.pair_point = np.asarray(self.pair_point, dtype=np.int64)
        self.pair_anchor = np.asarray(self.pair_anchor, dtype=np.float64).reshape(-1, 3)
        self.pair_range = np.asarray(self.pair_range, dtype=np.float64)
        if self.pair_channel is None:
            self.pair_channel = np.zeros(len(self.pair_scan), dtype=np.int64)
        self.validate()

    @property
    def n_cameras(self) -> int:
        return len(self.cam_R)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_scans(self) -> int:
        return len(self.scan_R)

    def validate(self):
        C, P, S = self.n_cameras, self.n_points, self.n_scans
        if len(self.intrinsics) != C or len(self.cam_t) != C:
            raise InvalidProblemError("camera arrays disagree in length")
        n2 = len(self.obs_camera)
        if not (len(self.obs_point) == len(self.obs_pixel) == len(self.obs_scale) == n2):
            raise InvalidProblemError("2D observation arrays disagree in length")
        n3 = len(self.pair_scan)
        if not (len(self.pair_laser) == len(self.pair_point) == len(self.pair_anchor)
                == len(self.pair_range) == n3):
            raise InvalidProblemError("3D observation arrays disagree in length")
        if n2 and (self.obs_camera.min() < 0 or self.obs_camera.max() >= C
                   or self.obs_point.min() < 0 or self.obs_point.max() >= P):
            raise InvalidProblemError("2D observation references an unknown camera or point")
        if n3 and (self.pair_scan.min() < 0 or self.pair_scan.max() >= S
                   or self.pair_point.max() >= P or self.pair_point.min() < -1):
            raise InvalidProblemError("3D observation references an unknown scan or point")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidProblemError("scale must be positive")
        if self.omega < 0 or self.huber_delta <= 0:
            raise InvalidProblemError("omega must be >= 0 and huber_delta > 0")

    def copy(self, **changes) -> "MergeProblem":
        base = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for k, v in base.items():
            if isinstance(v, np.ndarray):
                base[k] = v.copy()
        base.update(changes)
        return MergeProblem(**base)

    def without_space_terms(self) -> "MergeProblem":
        return self.copy(
            scan_R=np.zeros((0, 3, 3)), scan_t=np.zeros((0, 3)),
            pair_scan=np.zeros(0, np.int64), pair_laser=np.zeros((0, 3)),
            pair_point=np.zeros(0, np.int64), pair_anchor=np.zeros((0, 3)),
            pair_range=np.zeros(0), pair_channel=np.zeros(0, np.int64))

    # -- accessors -------------------------------------------------------

    def camera_centers(self) -> np.ndarray:
        return -np.einsum("nji,nj->ni", self.cam_R, self.cam_t)

    def scan_transform(self, i: int) -> Sim3Transform:
        return Sim3Transform(self.scale, self.scan_R[i], self.scan_t[i])


def problem_from_cameras(cameras: Sequence[CameraView], points, scans: Sequence[Sim3Transform],
                         scale: Optional[float] = None, **measurements) -> MergeProblem:
    """Assemble a problem from camera views and per-scan similarities.

    The shared scale defaults to the geometric mean of the per-scan scales.
    """
    if scale is None:
        scale = float(np.exp(np.mean([math.log(t.scale) for t in scans]))) if scans else 1.0
    return MergeProblem(
        intrinsics=np.array([c.intrinsics.as_array() for c in cameras]).reshape(-1, 4),
        cam_R=np.array([c.pose.rotation for c in cameras]).reshape(-1, 3, 3),
        cam_t=np.array([c.pose.translation for c in cameras]).reshape(-1, 3),
        points=points,
        scan_R=np.array([t.rotation for t in scans]).reshape(-1, 3, 3),
        scan_t=np.array([t.translation for t in scans]).reshape(-1, 3),
        scale=scale,
        **measurements,
    )


# ----------------------------------------------------------------------------
# robust loss


def huber(sq_norm, delta: float = 1.0):
    """Huber cost of a residual given its squared norm.

    ``e^2`` for ``e <= delta`` and ``2 delta e - delta^2`` beyond, so the value
    and slope are continuous at the boundary.
    """
    s = np.asarray(sq_norm, dtype=np.float64)
    e = np.sqrt(s)
    return np.where(e <= delta, s, 2.0 * delta * e - delta * delta)


def huber_weight(sq_norm, delta: float = 1.0):
    """Derivative of :func:`huber` with respect to the squared norm."""
    s = np.asarray(sq_norm, dtype=np.float64)
    e = np.sqrt(s)
    with np.errstate(divide="ignore"):
        return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


# ----------------------------------------------------------------------------
# residuals


def reprojection_residual(intr: CameraIntrinsics, pose: RigidPose, point, pixel,
                          sigma: float = 1.0) -> Optional[np.ndarray]:
    """Whitened 2-vector ``(x_obs - proj(X)) / sigma``; ``None`` behind the camera."""
    xc = pose.apply(np.asarray(point, float))
    if xc[2] <= 0:
        return None
    proj = np.array([intr.fx * xc[0] / xc[2] + intr.cx, intr.fy * xc[1] / xc[2] + intr.cy])
    return (np.asarray(pixel, float) - proj) / sigma


def space_residual(scan: Sim3Transform, laser_point, sfm_point, sigma: float = 1.0) -> np.ndarray:
    """Whitened 3-vector ``(s R X_laser + t - X_sfm) / sigma``."""
    return (scan.apply(np.asarray(laser_point, float)) - np.asarray(sfm_point, float)) / sigma


def _project_all(p: MergeProblem):
    R = p.cam_R[p.obs_camera]
    X = p.points[p.obs_point]
    RX = np.einsum("nij,nj->ni", R, X)
    xc = RX + p.cam_t[p.obs_camera]
    return RX, xc


def reprojection_residuals(p: MergeProblem) -> tuple[np.ndarray, np.ndarray]:
    """Whitened ``(O, 2)`` residuals and the in-front mask."""
    _, xc = _project_all(p)
    K = p.intrinsics[p.obs_camera]
    valid = xc[:, 2] > 0
    z = np.where(valid, xc[:, 2], 1.0)
    proj = np.stack([K[:, 0] * xc[:, 0] / z + K[:, 2], K[:, 1] * xc[:, 1] / z + K[:, 3]], 1)
    sig = p.covariance.pixel_std(p.obs_scale)
    r = (p.obs_pixel - proj) / sig[:, None]
    r[~valid] = 0.0
    return r, valid


def _space_targets(p: MergeProblem) -> np.ndarray:
    linked = p.pair_point >= 0
    Y = p.pair_anchor.copy()
    Y[linked] = p.points[p.pair_point[linked]]
    return Y


def space_residuals(p: MergeProblem) -> np.ndarray:
    RL = np.einsum("nij,nj->ni", p.scan_R[p.pair_scan], p.pair_laser)
    y = p.scale * RL + p.scan_t[p.pair_scan]
    sig = p.covariance.laser_std(p.pair_range)
    return (y - _space_targets(p)) / sig[:, None]


def reprojection_cost(p: MergeProblem) -> float:
    r, valid = reprojection_residuals(p)
    return float(huber((r[valid] ** 2).sum(1), p.huber_delta).sum())


def space_cost(p: MergeProblem) -> float:
    """Unweighted (omega-free) robust space cost."""
    if len(p.pair_scan) == 0:
        return 0.0
    r = space_residuals(p)
    return float(huber((r ** 2).sum(1), p.huber_delta).sum())


def total_cost(p: MergeProblem) -> float:
    return reprojection_cost(p) + p.omega * space_cost(p)


def reprojection_rms(p: MergeProblem) -> float:
    """Pixel RMS of the unwhitened reprojection errors."""
    r, valid = reprojection_residuals(p)
    if not valid.any():
        return 0.0
    raw = r[valid] * p.covariance.pixel_std(p.obs_scale[valid])[:, None]
    return float(np.sqrt((raw ** 2).sum(1).mean()))


def space_rms(p: MergeProblem) -> float:
    """RMS distance (SfM units) between mapped laser points and their SfM endpoints."""
    if len(p.pair_scan) == 0:
        return 0.0
    raw = space_residuals(p) * p.covariance.laser_std(p.pair_range)[:, None]
    return float(np.sqrt((raw ** 2).sum(1).mean()))


def compute_omega(p: MergeProblem, rc_exponent: float = 0.0) -> float:
    """Weight making the initial space cost equal ``10**rc_exponent`` times
    the initial reprojection cost."""
    cs = space_cost(p)
    if not cs > 0:
        raise MergeError("space cost is zero; nothing to merge")
    return reprojection_cost(p) / cs * 10.0 ** rc_exponent


def cost_ratio(p: MergeProblem) -> float:
    """``r_c = omega * C_S / C_R`` at the current state."""
    return p.omega * space_cost(p) / reprojection_cost(p)


# ----------------------------------------------------------------------------
# parameter layout and Jacobians


@dataclass
class Layout:
    cam_cols: np.ndarray  # (C, 6) column or -1
    scan_cols: np.ndarray  # (S, 6)
    scale_col: int
    point_cols: np.ndarray  # (P, 3)
    n_reduced: int  # columns before the point block
    n_params: int
    gauge_camera: int = -1
    gauge_axis: int = -1


def gauge_choice(p: MergeProblem) -> tuple[int, int]:
    """Camera and translation axis frozen to remove the scale gauge."""
    if not p.fix_scale_gauge or p.n_cameras < 2:
        return -1, -1
    c = p.camera_centers()
    ref = min(p.fixed_cameras) if p.fixed_cameras else 0
    d = np.linalg.norm(c - c[ref], axis=1)
    d[list(p.fixed_cameras)] = -1
    g = int(np.argmax(d))
    if d[g] <= 0:
        return -1, -1
    lever = p.cam_R[g] @ (c[g] - c[ref])
    return g, int(np.argmax(np.abs(lever)))


def make_layout(p: MergeProblem, gauge: Optional[tuple[int, int]] = None) -> Layout:
    C, S, P = p.n_cameras, p.n_scans, p.n_points
    g, ax = gauge if gauge is not None else gauge_choice(p)
    cam_free = np.ones((C, 6), dtype=bool)
    for j in p.fixed_cameras:
        if 0 <= j < C:
            cam_free[j] = False
    if g >= 0:
        cam_free[g, 3 + ax] = False
    col = 0
    cam_cols = np.full((C, 6), -1, dtype=np.int64)
    n = int(cam_free.sum())
    cam_cols[cam_free] = np.arange(n)
    col = n
    scan_cols = (col + np.arange(6 * S)).reshape(S, 6)
    col += 6 * S
    scale_col = col if S > 0 else -1
    col += 1 if S > 0 else 0
    n_reduced = col
    point_cols = (col + np.arange(3 * P)).reshape(P, 3)
    col += 3 * P
    return Layout(cam_cols, scan_cols, scale_col, point_cols, n_reduced, col, g, ax)


def _scatter(rows, cols, vals, out_r, out_c, out_v):
    keep = cols >= 0
    out_r.append(rows[keep])
    out_c.append(cols[keep])
    out_v.append(vals[keep])


def residual_vector(p: MergeProblem) -> tuple[np.ndarray, np.ndarray]:
    """Stacked whitened residuals ``[2D rows..., 3D rows...]`` and the 2D validity mask."""
    r2, valid = reprojection_residuals(p)
    r3 = space_residuals(p) if len(p.pair_scan) else np.zeros((0, 3))
    return np.concatenate([r2.ravel(), r3.ravel()]), valid


def jacobian(p: MergeProblem, layout: Optional[Layout] = None) -> sp.csr_matrix:
    """Sparse Jacobian of :func:`residual_vector` in the local parameterization.

    Rows of behind-camera observations are zero.
    """
    L = layout or make_layout(p)
    n2 = len(p.obs_camera)
    n3 = len(p.pair_scan)
    rows_out, cols_out, vals_out = [], [], []

    if n2:
        RX, xc = _project_all(p)
        K = p.intrinsics[p.obs_camera]
        valid = xc[:, 2] > 0
        z = np.where(valid, xc[:, 2], 1.0)
        dproj = np.zeros((n2, 2, 3))
        dproj[:, 0, 0] = K[:, 0] / z
        dproj[:, 0, 2] = -K[:, 0] * xc[:, 0] / z ** 2
        dproj[:, 1, 1] = K[:, 1] / z
        dproj[:, 1, 2] = -K[:, 1] * xc[:, 1] / z ** 2
        sig = p.covariance.pixel_std(p.obs_scale)
        A = -dproj / sig[:, None, None]
        A[~valid] = 0.0
        J_rot = A @ -skew(RX)  # d xc / d phi = -[R X]x
        J_t = A
        J_X = A @ p.cam_R[p.obs_camera]
        blocks = np.concatenate([J_rot, J_t, J_X], axis=2)  # (n2, 2, 9)
        cols = np.concatenate([L.cam_cols[p.obs_camera], L.point_cols[p.obs_point]], axis=1)
        rows = np.arange(2 * n2).reshape(n2, 2)
        R_idx = np.broadcast_to(rows[:, :, None], blocks.shape)
        C_idx = np.broadcast_to(cols[:, None, :], blocks.shape)
        _scatter(R_idx.ravel(), C_idx.ravel(), blocks.ravel(), rows_out, cols_out, vals_out)

    if n3:
        base = 2 * n2
        sig = p.covariance.laser_std(p.pair_range)
        RL = np.einsum("nij,nj->ni", p.scan_R[p.pair_scan], p.pair_laser)
        s = p.scale
        inv = (1.0 / sig)[:, None, None]
        J_rot = -s * skew(RL) * inv
        J_t = np.broadcast_to(np.eye(3), (n3, 3, 3)) * inv
        J_s = (s * RL / sig[:, None])[:, :, None]
        rows = base + np.arange(3 * n3).reshape(n3, 3)
        blocks = np.concatenate([J_rot, J_t, J_s], axis=2)  # (n3, 3, 7)
        cols = np.concatenate([L.scan_cols[p.pair_scan],
                               np.full((n3, 1), L.scale_col)], axis=1)
        R_idx = np.broadcast_to(rows[:, :, None], blocks.shape)
        C_idx = np.broadcast_to(cols[:, None, :], blocks.shape)
        _scatter(R_idx.ravel(), C_idx.ravel(), blocks.ravel(), rows_out, cols_out, vals_out)
        linked = np.flatnonzero(p.pair_point >= 0)
        if len(linked):
            Jp = -np.broadcast_to(np.eye(3), (len(linked), 3, 3)) * inv[linked]
            pc = L.point_cols[p.pair_point[linked]]
            R_idx = np.broadcast_to(rows[linked][:, :, None], Jp.shape)
            C_idx = np.broadcast_to(pc[:, None, :], Jp.shape)
            _scatter(R_idx.ravel(), C_idx.ravel(), Jp.ravel(), rows_out, cols_out, vals_out)

    n_rows = 2 * n2 + 3 * n3
    if not rows_out:
        return sp.csr_matrix((n_rows, L.n_params))
    return sp.csr_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n_rows, L.n_params))


def retract(p: MergeProblem, delta: np.ndarray, layout: Optional[Layout] = None) -> MergeProblem:
    """Apply a local-parameter increment, returning a new problem."""
    L = layout or make_layout(p)
    q = p.copy()

    def take(cols):
        out = np.zeros(cols.shape)
        m = cols >= 0
        out[m] = delta[cols[m]]
        return out

    dc = take(L.cam_cols)
    q.cam_R = np.einsum("nij,njk->nik", so3_exp(dc[:, :3]).reshape(-1, 3, 3), q.cam_R)
    q.cam_t = q.cam_t + dc[:, 3:]
    if p.n_scans:
        ds = take(L.scan_cols)
        q.scan_R = np.einsum("nij,njk->nik", so3_exp(ds[:, :3]).reshape(-1, 3, 3), q.scan_R)
        q.scan_t = q.scan_t + ds[:, 3:]
        q.scale = float(p.scale * math.exp(delta[L.scale_col]))
    q.points = q.points + take(L.point_cols)
    _renormalize(q)
    return q


def _renormalize(p: MergeProblem) -> None:
    # batched polar decomposition keeps rotations on the manifold
    for name in ("cam_R", "scan_R"):
        R = getattr(p, name)
        if len(R):
            U, _, Vt = np.linalg.svd(R)
            det = np.sign(np.linalg.det(U @ Vt))
            U[:, :, 2] *= det[:, None]
            setattr(p, name, U @ Vt)


# ----------------------------------------------------------------------------
# solver


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    initial_reprojection_rms: float
    final_reprojection_rms: float
    initial_space_rms: float
    final_space_rms: float
    convergence: str
    omega: float
    scale: float
    cost_history: list = field(default_factory=list)
    n_behind_camera: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _block_sum(index: np.ndarray, blocks: np.ndarray, n: int) -> np.ndarray:
    """Sum ``blocks[q]`` into ``out[index[q]]`` for an ``(n, ...)`` output."""
    shape = blocks.shape[1:]
    k = int(np.prod(shape))
    flat = (index[:, None] * k + np.arange(k)).ravel()
    return np.bincount(flat, weights=blocks.reshape(-1), minlength=n * k).reshape((n,) + shape)


@dataclass
class NormalBlocks:
    """Robust Gauss-Newton system ``H = J^T W J``, ``g = J^T W r`` by blocks.

    Reduced indices cover every camera and scan parameter plus the scale,
    frozen or not; ``free`` selects the optimized ones. Camera/point coupling
    is kept per measurement: ``b2[o]`` couples the 6 reduced entries
    ``rows2[o]`` with point ``pts2[o]``, and likewise for linked space pairs.
    """

    Hrr: np.ndarray
    Hpp: np.ndarray
    g_r: np.ndarray
    g_p: np.ndarray
    rows2: np.ndarray
    pts2: np.ndarray
    b2: np.ndarray
    rows3: np.ndarray
    pts3: np.ndarray
    b3: np.ndarray
    free: np.ndarray

    def coupling(self):
        for rows, pts, b in ((self.rows2, self.pts2, self.b2), (self.rows3, self.pts3, self.b3)):
            if len(pts):
                yield rows, pts, b

    def dense(self) -> np.ndarray:
        """Full matrix over the free parameters (reduced block first)."""
        nf, P = len(self.Hrr), len(self.Hpp)
        H = np.zeros((nf + 3 * P, nf + 3 * P))
        H[:nf, :nf] = self.Hrr
        for k in range(P):
            H[nf + 3 * k:nf + 3 * k + 3, nf + 3 * k:nf + 3 * k + 3] = self.Hpp[k]
        for rows, pts, b in self.coupling():
            for r, k, blk in zip(rows, pts, b):
                H[np.ix_(r, nf + 3 * k + np.arange(3))] += blk
        H[nf:, :nf] = H[:nf, nf:].T
        keep = np.concatenate([self.free, np.ones(3 * P, dtype=bool)])
        return H[np.ix_(keep, keep)]

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.g_r[self.free], self.g_p.ravel()])

    def diagonal(self) -> np.ndarray:
        d_p = np.einsum("kii->ki", self.Hpp).ravel()
        return np.concatenate([np.diag(self.Hrr)[self.free], d_p])


def _reduced_free(p: MergeProblem, L: Layout) -> np.ndarray:
    m = np.concatenate([L.cam_cols.ravel(), L.scan_cols.ravel(),
                        [L.scale_col] if p.n_scans else []])
    return m >= 0


def _normal_blocks(p: MergeProblem, L: Layout) -> NormalBlocks:
    C, S, P = p.n_cameras, p.n_scans, p.n_points
    nf = 6 * C + 6 * S + (1 if S else 0)
    Hrr = np.zeros((nf, nf))
    g_r = np.zeros(nf)
    Hpp = np.zeros((P, 3, 3))
    g_p = np.zeros((P, 3))
    rows2 = np.zeros((0, 6), dtype=np.int64)
    rows3 = np.zeros((0, 7), dtype=np.int64)
    pts2 = pts3 = np.zeros(0, dtype=np.int64)
    b2 = np.zeros((0, 6, 3))
    b3 = np.zeros((0, 7, 3))

    n2 = len(p.obs_camera)
    if n2:
        r, valid = reprojection_residuals(p)
        RX, xc = _project_all(p)
        K = p.intrinsics[p.obs_camera]
        z = np.where(valid, xc[:, 2], 1.0)
        A = np.zeros((n2, 2, 3))
        A[:, 0, 0] = K[:, 0] / z
        A[:, 0, 2] = -K[:, 0] * xc[:, 0] / z ** 2
        A[:, 1, 1] = K[:, 1] / z
        A[:, 1, 2] = -K[:, 1] * xc[:, 1] / z ** 2
        A /= -p.covariance.pixel_std(p.obs_scale)[:, None, None]
        A[~valid] = 0.0
        Jc = np.concatenate([A @ -skew(RX), A], axis=2)
        Jx = A @ p.cam_R[p.obs_camera]
        w = huber_weight((r ** 2).sum(1), p.huber_delta) * valid
        wJc = Jc * w[:, None, None]
        cam_blocks = _block_sum(p.obs_camera, np.einsum("nai,naj->nij", wJc, Jc), C)
        for j in range(C):
            Hrr[6 * j:6 * j + 6, 6 * j:6 * j + 6] += cam_blocks[j]
        g_r[:6 * C] += _block_sum(p.obs_camera, np.einsum("nai,na->ni", wJc, r), C).ravel()
        Hpp += _block_sum(p.obs_point, np.einsum("nai,naj->nij", Jx * w[:, None, None], Jx), P)
        g_p += _block_sum(p.obs_point, np.einsum("nai,na->ni", Jx * w[:, None, None], r), P)
        rows2 = 6 * p.obs_camera[:, None] + np.arange(6)
        pts2 = p.obs_point
        b2 = np.einsum("nai,naj->nij", wJc, Jx)

    n3 = len(p.pair_scan)
    if n3:
        r3 = space_residuals(p)
        sig = p.covariance.laser_std(p.pair_range)
        RL = np.einsum("nij,nj->ni", p.scan_R[p.pair_scan], p.pair_laser)
        inv = (1.0 / sig)[:, None, None]
        Js = np.concatenate([-p.scale * skew(RL) * inv,
                             np.broadcast_to(np.eye(3), (n3, 3, 3)) * inv,
                             (p.scale * RL / sig[:, None])[:, :, None]], axis=2)
        w = p.omega * huber_weight((r3 ** 2).sum(1), p.huber_delta)
        wJs = Js * w[:, None, None]
        rows = np.concatenate([6 * C + 6 * p.pair_scan[:, None] + np.arange(6),
                               np.full((n3, 1), 6 * C + 6 * S)], axis=1)
        blocks = np.einsum("nai,naj->nij", wJs, Js)
        flat = (rows[:, :, None] * nf + rows[:, None, :]).ravel()
        Hrr += np.bincount(flat, weights=blocks.ravel(), minlength=nf * nf).reshape(nf, nf)
        g_r += np.bincount(rows.ravel(), weights=np.einsum("nai,na->ni", wJs, r3).ravel(),
                           minlength=nf)
        linked = np.flatnonzero(p.pair_point >= 0)
        if len(linked):
            k = p.pair_point[linked]
            wl, il = w[linked], inv[linked, 0, 0]
            Hpp += _block_sum(k, (wl * il ** 2)[:, None, None] * np.eye(3), P)
            g_p += _block_sum(k, -(wl * il)[:, None] * r3[linked], P)
            rows3 = rows[linked]
            pts3 = k
            b3 = -wJs[linked].transpose(0, 2, 1) * il[:, None, None]
    return NormalBlocks(Hrr, Hpp, g_r, g_p, rows2, pts2, b2, rows3, pts3, b3, _reduced_free(p, L))


def _normal_equations(p: MergeProblem, L: Layout):
    """Dense ``H`` and ``g`` over the free parameters (test and fallback path)."""
    nb = _normal_blocks(p, L)
    return nb.dense(), nb.gradient()


MIN_DIAG = 1e-6
MAX_DIAG = 1e32
SCHUR_CHUNK = 2048


def _solve_dense(nb: NormalBlocks, lam: float) -> np.ndarray:
    H = nb.dense()
    d = np.clip(np.diag(H), MIN_DIAG, MAX_DIAG)
    return np.linalg.solve(H + lam * np.diag(d), -nb.gradient())


def _schur_complement(nb: NormalBlocks, lam: float):
    """Damped reduced system after eliminating the 3x3 point blocks.

    Returns ``(S, rhs, binv)`` over all reduced indices, frozen ones included.
    """
    nf, P = len(nb.Hrr), len(nb.Hpp)
    d_r = np.clip(np.diag(nb.Hrr), MIN_DIAG, MAX_DIAG)
    S = nb.Hrr + np.diag(lam * d_r)
    rhs = -nb.g_r.copy()
    Hpp = nb.Hpp.copy()
    idx = np.arange(3)
    Hpp[:, idx, idx] += lam * np.clip(Hpp[:, idx, idx], MIN_DIAG, MAX_DIAG)
    binv = np.linalg.inv(Hpp)
    gp = nb.g_p

    for rows, pts, blk in nb.coupling():
        y = np.matmul(blk, binv[pts])
        rhs += np.bincount(rows.ravel(), weights=np.einsum("nij,nj->ni", y, gp[pts]).ravel(),
                           minlength=nf)
    for a in range(0, P, SCHUR_CHUNK):
        b = min(P, a + SCHUR_CHUNK)
        width = 3 * (b - a)
        flat, wv, yv = [], [], []
        for rows, pts, blk in nb.coupling():
            m = (pts >= a) & (pts < b)
            if not m.any():
                continue
            cols = 3 * (pts[m] - a)[:, None] + idx
            flat.append((rows[m][:, :, None] * width + cols[:, None, :]).ravel())
            wv.append(blk[m].ravel())
            yv.append(np.matmul(blk[m], binv[pts[m]]).ravel())
        if not flat:
            continue
        flat = np.concatenate(flat)
        W = np.bincount(flat, weights=np.concatenate(wv), minlength=nf * width).reshape(nf, width)
        Y = np.bincount(flat, weights=np.concatenate(yv), minlength=nf * width).reshape(nf, width)
        S -= Y @ W.T
    return S, rhs, binv


def _solve_schur(nb: NormalBlocks, lam: float) -> np.ndarray:
    """Eliminate the 3x3 point blocks and solve the reduced system."""
    nf, P = len(nb.Hrr), len(nb.Hpp)
    free = nb.free
    S, rhs, binv = _schur_complement(nb, lam)
    Sf = S[np.ix_(free, free)]
    try:
        dr_f = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Sf), rhs[free])
    except np.linalg.LinAlgError:
        dr_f = np.linalg.lstsq(Sf, rhs[free], rcond=None)[0]
    dr = np.zeros(nf)
    dr[free] = dr_f
    back = -nb.g_p.copy()
    for rows, pts, blk in nb.coupling():
        back -= _block_sum(pts, np.einsum("nij,ni->nj", blk, dr[rows]), P)
    dp = np.einsum("kij,kj->ki", binv, back)
    return np.concatenate([dr_f, dp.ravel()])


def reduced_camera_matrix(p: MergeProblem, layout: Optional[Layout] = None) -> np.ndarray:
    """Undamped Schur complement over the free camera, scan and scale parameters.

    The full normal matrix is nonsingular iff every point block and this
    matrix are positive definite, which makes it the cheap gauge diagnostic.
    """
    L = layout or make_layout(p)
    nb = _normal_blocks(p, L)
    S, _, _ = _schur_complement(nb, 0.0)
    return S[np.ix_(nb.free, nb.free)]


def normal_matrix(p: MergeProblem, layout: Optional[Layout] = None) -> np.ndarray:
    """Dense undamped Gauss-Newton matrix (for diagnostics and tests)."""
    L = layout or make_layout(p)
    return _normal_blocks(p, L).dense()


def _state_norm(p: MergeProblem) -> float:
    return math.sqrt(float((p.points ** 2).sum() + (p.cam_t ** 2).sum() + (p.scan_t ** 2).sum()))


def solve(problem: MergeProblem, max_iters: int = 50, tol: float = 1e-10,
          gradient_tol: float = 1e-10, linear_solver: str = "schur",
          initial_lambda: float = 1e-4, step_tol: float = 1e-12) -> tuple[SolveReport, MergeProblem]:
    """Levenberg-Marquardt minimization of the robust merge cost.

    Terminates when an accepted step lowers the cost by less than ``tol``
    relative, when the gradient infinity norm drops below ``gradient_tol``
    times ``(1 + cost)``, when the step shrinks below ``step_tol`` relative to
    the state, or after ``max_iters`` iterations. The input problem
    is left untouched.
    """
    p = problem.copy()
    cost = total_cost(p)
    if not math.isfinite(cost):
        raise InvalidProblemError("non-finite cost at the initial values")
    _, valid = reprojection_residuals(p)
    n_behind = int((~valid).sum())
    if n_behind:
        log.warning("%d observations behind their camera are excluded", n_behind)

    L = make_layout(p)
    init = (cost, reprojection_rms(p), space_rms(p))
    history = [cost]
    lam, nu = initial_lambda, 2.0
    reason = "max_iters"
    it = 0
    if linear_solver not in ("schur", "dense"):
        raise ValueError(f"unknown linear solver {linear_solver!r}")
    step = _solve_schur if linear_solver == "schur" else _solve_dense
    nb = _normal_blocks(p, L)
    while it < max_iters:
        g = nb.gradient()
        if np.abs(g).max(initial=0.0) <= gradient_tol * (1.0 + cost):
            reason = "gradient"
            break
        it += 1
        d = np.clip(nb.diagonal(), MIN_DIAG, MAX_DIAG)
        accepted = False
        while not accepted:
            delta = step(nb, lam)
            if np.linalg.norm(delta) <= step_tol * (step_tol + _state_norm(p)):
                break
            # model decrease of the exact damped step: -g.delta + lam * delta' D delta
            pred = -(g @ delta) + lam * (delta * d) @ delta
            q = retract(p, delta, L)
            new_cost = total_cost(q)
            log.debug("lm: lam %.3g cost %.6g -> %.6g", lam, cost, new_cost)
            if math.isfinite(new_cost) and new_cost < cost:
                accepted = True
                rho = (cost - new_cost) / pred if pred > 0 else 0.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
            else:
                lam *= nu
                nu *= 2.0
                if lam > 1e16:
                    break
        if not accepted:
            reason = "no_descent" if lam > 1e16 else "step_tolerance"
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        p, cost = q, new_cost
        history.append(cost)
        if rel < tol:
            reason = "cost_tolerance"
            break
        nb = _normal_blocks(p, L)

    report = SolveReport(
        iterations=it, initial_cost=init[0], final_cost=cost,
        initial_reprojection_rms=init[1], final_reprojection_rms=reprojection_rms(p),
        initial_space_rms=init[2], final_space_rms=space_rms(p), convergence=reason,
        omega=p.omega, scale=p.scale, cost_history=history, n_behind_camera=n_behind)
    log.info("merge: %s after %d iterations, cost %.6g -> %.6g", reason, it,
             report.initial_cost, report.final_cost)
    return report, p
