"""Reconstruction quality measures."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Sim3Transform

DEFAULT_TAU = 0.01


@dataclass(frozen=True)
class ReferencePair:
    sfm_point: np.ndarray
    laser_point: np.ndarray
    region: str = "outdoor"
    scan: int = 0


@dataclass(frozen=True)
class PRFReport:
    tau: float
    precision: float
    recall: float
    fscore: float

    def to_dict(self) -> dict:
        return asdict(self)


def rms_reference_error(sfm_points, laser_points, transforms: Sequence[Sim3Transform] | Sim3Transform,
                        scan_ids=None) -> float:
    """RMS distance between SfM-side points and laser-side points mapped
    through their scan's similarity."""
    sfm = np.atleast_2d(np.asarray(sfm_points, dtype=np.float64))
    las = np.atleast_2d(np.asarray(laser_points, dtype=np.float64))
    if len(sfm) == 0 or sfm.shape != las.shape:
        raise ValueError("need matching, non-empty point lists")
    if isinstance(transforms, Sim3Transform):
        transforms = [transforms]
    ids = np.zeros(len(sfm), dtype=np.int64) if scan_ids is None else np.asarray(scan_ids)
    mapped = np.empty_like(las)
    for i in np.unique(ids):
        m = ids == i
        mapped[m] = transforms[int(i)].apply(las[m])
    return float(np.sqrt(np.mean(np.sum((mapped - sfm) ** 2, axis=1))))


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / size).astype(np.int64)


def voxel_resample(points, size: float, frame: Optional[Sim3Transform] = None) -> np.ndarray:
    """One centroid per occupied voxel of an origin-anchored grid.

    With ``frame`` the grid is anchored to that frame instead: points are
    binned in ``frame^-1`` coordinates. Output is sorted by voxel index.
    """
    if size <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    local = frame.inverse().apply(pts) if frame is not None else pts
    keys = voxel_keys(local, size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, local)
    cent = sums / counts[:, None]
    return frame.apply(cent) if frame is not None else cent


def _fraction_within(src: np.ndarray, dst: np.ndarray, tau: float) -> float:
    d, _ = cKDTree(dst).query(src, k=1)
    return 100.0 * float(np.count_nonzero(d < tau)) / len(src)


def fscore(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def precision_recall_fscore(recon, gt, tau: float = DEFAULT_TAU, resample: bool = True,
                            frame: Optional[Sim3Transform] = None) -> PRFReport:
    """Percent precision, recall and F-score at distance ``tau``.

    Both clouds are first resampled on a ``tau / 2`` voxel grid. A point
    counts when its nearest neighbor in the other cloud is closer than ``tau``.
    """
    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("both clouds must be non-empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if resample:
        recon = voxel_resample(recon, tau / 2, frame)
        gt = voxel_resample(gt, tau / 2, frame)
    p = _fraction_within(recon, gt, tau)
    r = _fraction_within(gt, recon, tau)
    return PRFReport(tau, p, r, fscore(p, r))
