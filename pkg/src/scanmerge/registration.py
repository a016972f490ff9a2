"""Coarse scan-to-SfM registration: closed-form similarity fit inside RANSAC."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Sim3Transform

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


class DegenerateConfigurationError(ValueError):
    """Source points are coincident or collinear."""


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Correspondence3D:
    source: np.ndarray
    target: np.ndarray
    channel: str = "ground"
    weight: float = 1.0


def _stack(pairs):
    src = np.array([p.source for p in pairs], dtype=np.float64)
    dst = np.array([p.target for p in pairs], dtype=np.float64)
    w = np.array([p.weight for p in pairs], dtype=np.float64)
    return src, dst, w


def umeyama_sim3(src, dst=None, weights=None, estimate_scale: bool = True) -> Sim3Transform:
    """Weighted least-squares similarity taking ``src`` onto ``dst``.

    Minimizes ``sum_i w_i |s R src_i + t - dst_i|^2``. ``src`` may also be a
    list of :class:`Correspondence3D`.
    """
    if dst is None:
        src, dst, weights = _stack(src)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (N, 3)")
    if len(src) < 3:
        raise DegenerateConfigurationError("need at least 3 pairs")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    wn = w / w.sum()
    mu_s = wn @ src
    mu_d = wn @ dst
    xs = src - mu_s
    xd = dst - mu_d
    scatter = (xs * wn[:, None]).T @ xs
    ev = np.linalg.eigvalsh(scatter)
    if ev[-1] <= 0 or ev[-2] <= RANK_TOL * ev[-1]:
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = (xd * wn[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    scale = float((D * S).sum() / np.trace(scatter)) if estimate_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return Sim3Transform(scale, R, t)


@dataclass
class RansacReport:
    transform: Sim3Transform
    sample_transform: Sim3Transform
    inliers: np.ndarray
    inlier_rms: float
    iterations: int
    attempts: int
    dist_thresh: float

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "sample_transform": self.sample_transform.to_dict(),
            "n_inliers": int(len(self.inliers)),
            "inlier_rms": self.inlier_rms,
            "iterations": self.iterations,
            "attempts": self.attempts,
            "dist_thresh": self.dist_thresh,
        }


def _residuals(T: Sim3Transform, src, dst) -> np.ndarray:
    return np.linalg.norm(T.apply(src) - dst, axis=1)


def ransac_sim3(src, dst=None, weights=None, n_samples: int = 100, dist_thresh: float = 0.1,
                seed: Optional[int] = 0, estimate_scale: bool = True,
                max_refits: int = 5) -> RansacReport:
    """RANSAC over minimal 3-point samples followed by inlier refits.

    Degenerate samples are redrawn and do not count toward ``n_samples``
    (capped at ``20 * n_samples`` draws). The consensus set is refitted until
    it stops changing; the refit is kept only while it retains at least as
    many inliers as the best minimal sample.
    """
    if dst is None:
        src, dst, weights = _stack(src)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError("need at least 3 pairs")
    if dist_thresh <= 0:
        raise ValueError("dist_thresh must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)

    best_T, best_in, best_rms = None, None, np.inf
    valid = attempts = 0
    while valid < n_samples and attempts < 20 * n_samples:
        attempts += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            T = umeyama_sim3(src[idx], dst[idx], w[idx], estimate_scale)
        except DegenerateConfigurationError:
            continue
        valid += 1
        r = _residuals(T, src, dst)
        inl = np.flatnonzero(r < dist_thresh)
        rms = float(np.sqrt(np.mean(r[inl] ** 2))) if len(inl) else np.inf
        if best_in is None or len(inl) > len(best_in) or (len(inl) == len(best_in) and rms < best_rms):
            best_T, best_in, best_rms = T, inl, rms
    if best_in is None or len(best_in) < 3:
        raise RegistrationError("no sample reached 3 inliers")

    sample_T = best_T
    T, inl = best_T, best_in
    for _ in range(max_refits):
        try:
            T2 = umeyama_sim3(src[inl], dst[inl], w[inl], estimate_scale)
        except DegenerateConfigurationError:
            break
        inl2 = np.flatnonzero(_residuals(T2, src, dst) < dist_thresh)
        if len(inl2) < len(best_in):
            break
        same = np.array_equal(inl2, inl)
        T, inl = T2, inl2
        if same:
            break
    r = _residuals(T, src, dst)[inl]
    rms = float(np.sqrt(np.mean(r ** 2)))
    log.debug("ransac: %d/%d inliers, rms %.4g", len(inl), n, rms)
    return RansacReport(T, sample_T, inl, rms, valid, attempts, dist_thresh)
