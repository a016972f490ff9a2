"""Matches between synthetic scan views and captured images, for simulated scenes.

The simulator knows where every SfM track truly appears in a rendered view.
A match is that location disturbed three ways: small localization noise on
every match, a fraction of near mismatches displaced by a few pixels (the
kind that repeated texture produces and that survives RANSAC), and a fraction
of gross outliers placed anywhere in the image. The depth stored in the
rendered view then turns each matched pixel into a laser point, exactly as
for real matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import CameraView, ColoredPointCloud, RigidPose, Sim3Transform
from .synth import (
    CubeRig,
    SynthImage,
    depth_edge_mask,
    matching_partners,
    pixels_to_points,
    select_aerial_views,
    synthesize_view,
)

CLEAN, NEAR_MISMATCH, OUTLIER = 0, 1, 2
GROUND, AERIAL = 0, 1


@dataclass(frozen=True)
class MatchNoise:
    pixel_sigma: float = 0.5
    mismatch_fraction: float = 0.3
    mismatch_pixels: tuple = (2.0, 6.0)
    outlier_fraction: float = 0.1

    def __post_init__(self):
        lo, hi = self.mismatch_pixels
        if self.pixel_sigma < 0 or not 0 <= lo <= hi:
            raise ValueError("match noise magnitudes must be nonnegative")
        if not (0 <= self.mismatch_fraction and 0 <= self.outlier_fraction
                and self.mismatch_fraction + self.outlier_fraction < 1):
            raise ValueError("mismatch and outlier fractions must sum below 1")


@dataclass
class ViewMatches:
    laser: np.ndarray  # (n, 3) scan frame
    track: np.ndarray  # (n,)
    kind: np.ndarray  # CLEAN, NEAR_MISMATCH or OUTLIER

    @classmethod
    def empty(cls) -> "ViewMatches":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.track)


def concat_matches(parts: Sequence[ViewMatches]) -> ViewMatches:
    parts = [p for p in parts if len(p)]
    if not parts:
        return ViewMatches.empty()
    return ViewMatches(np.vstack([p.laser for p in parts]), np.concatenate([p.track for p in parts]),
                       np.concatenate([p.kind for p in parts]))


def disturb_pixels(uv: np.ndarray, noise: MatchNoise, width: int, height: int,
                   rng: np.random.Generator):
    """Noisy copies of true pixel positions and the kind of each match."""
    n = len(uv)
    u = rng.random(n)
    kind = np.where(u < noise.outlier_fraction, OUTLIER,
                    np.where(u < noise.outlier_fraction + noise.mismatch_fraction,
                             NEAR_MISMATCH, CLEAN))
    out = uv + rng.normal(0.0, noise.pixel_sigma, (n, 2))
    ang = rng.uniform(0, 2 * math.pi, n)
    mag = rng.uniform(*noise.mismatch_pixels, n)
    near = kind == NEAR_MISMATCH
    out[near] += (mag[:, None] * np.c_[np.cos(ang), np.sin(ang)])[near]
    far = kind == OUTLIER
    out[far] = rng.uniform([0, 0], [width, height], (int(far.sum()), 2))
    return out, kind


def match_view(img: SynthImage, mask: Optional[np.ndarray], true_uv: np.ndarray,
               tracks: np.ndarray, noise: MatchNoise, rng: np.random.Generator) -> ViewMatches:
    """Disturb, then look up depth; pixels without reliable depth are dropped.

    Returned laser points are in ``img.frame``'s target frame.
    """
    if len(tracks) == 0:
        return ViewMatches.empty()
    uv, kind = disturb_pixels(np.asarray(true_uv, float), noise, img.width, img.height, rng)
    pts, ok = pixels_to_points(img, uv, mask)
    return ViewMatches(pts[ok], np.asarray(tracks)[ok], kind[ok])


def face_in_sfm(face: CameraView, scan_pose: RigidPose, sfm_scale: float) -> CameraView:
    """A cube face expressed in the SfM frame given the scan's world pose."""
    R = face.pose.rotation @ scan_pose.rotation.T
    c = sfm_scale * scan_pose.apply(face.center)
    return CameraView(face.intrinsics, RigidPose(R, -R @ c), face.label)


def ground_matches(faces: Sequence[Optional[SynthImage]], rig: CubeRig, scan_pose: RigidPose,
                   sfm_scale: float, cameras: Sequence[CameraView], obs_camera, obs_point,
                   track_laser: np.ndarray, visible: np.ndarray, noise: MatchNoise,
                   max_pairs: int, rng: np.random.Generator, grad_thresh: float,
                   max_distance: float = 5.0, max_angle_deg: float = 45.0) -> ViewMatches:
    """Matches between the cube views of one scan and captured ground images.

    A track can be matched on a face when a captured ground camera within the
    partner limits observes it and the scanner saw it. ``track_laser`` holds
    the true scan-frame position of every track; ``visible`` lists the tracks
    in the scanner's line of sight.
    """
    obs_camera, obs_point = np.asarray(obs_camera), np.asarray(obs_point)
    ground = [j for j, c in enumerate(cameras) if c.label == "captured-ground"]
    taken = np.zeros(len(track_laser), dtype=bool)
    cand_face, cand_track, cand_uv = [], [], []
    for f, (img, face) in enumerate(zip(faces, rig.views)):
        if img is None:
            continue
        sub = [cameras[j] for j in ground]
        partners = [ground[i] for i in matching_partners(face_in_sfm(face, scan_pose, sfm_scale),
                                                         sub, max_distance * sfm_scale,
                                                         max_angle_deg)]
        if not partners:
            continue
        seen = np.unique(obs_point[np.isin(obs_camera, partners)])
        seen = seen[np.isin(seen, visible) & ~taken[seen]]
        uv, front = face.project(track_laser[seen])
        ok = front & face.in_image(uv)
        cand_face += [f] * int(ok.sum())
        cand_track.append(seen[ok])
        cand_uv.append(uv[ok])
        taken[seen[ok]] = True
    if not cand_face:
        return ViewMatches.empty()
    cand_face = np.asarray(cand_face)
    cand_track = np.concatenate(cand_track)
    cand_uv = np.vstack(cand_uv)
    pick = np.sort(rng.permutation(len(cand_track))[:max_pairs])
    parts = []
    for f in np.unique(cand_face[pick]):
        rows = pick[cand_face[pick] == f]
        img = faces[f]
        parts.append(match_view(img, depth_edge_mask(img, grad_thresh), cand_uv[rows],
                                cand_track[rows], noise, rng))
    return concat_matches(parts)


def aerial_matches(cloud: ColoredPointCloud, coarse: Sim3Transform, cameras: Sequence[CameraView],
                   obs_camera, obs_point, track_laser: np.ndarray, visible: np.ndarray,
                   noise: MatchNoise, max_pairs: int, rng: np.random.Generator,
                   grad_thresh: float, n_views: int = 5, fill_radius: float = 3,
                   scan_id: int = 0):
    """Matches between aerial views rendered from a coarsely aligned scan and
    the captured aerial images.

    The scan is carried into the SfM frame by ``coarse`` and rendered with the
    estimated aerial cameras; depth lookups are mapped back to the scan frame.
    Returns ``(matches, chosen camera indices)``.
    """
    obs_camera, obs_point = np.asarray(obs_camera), np.asarray(obs_point)
    aerial = [j for j, c in enumerate(cameras) if c.label == "captured-aerial"]
    if not aerial:
        return ViewMatches.empty(), []
    moved = cloud.transformed(coarse)
    try:
        chosen = [aerial[i] for i in select_aerial_views(moved, [cameras[j] for j in aerial],
                                                         n_views)]
    except ValueError:
        return ViewMatches.empty(), []
    back = coarse.inverse()
    per_view = max(1, max_pairs // len(chosen))
    taken = np.zeros(len(track_laser), dtype=bool)
    parts = []
    for j in chosen:
        cam = cameras[j]
        seen = np.unique(obs_point[obs_camera == j])
        seen = seen[np.isin(seen, visible) & ~taken[seen]]
        uv, front = cam.project(coarse.apply(track_laser[seen]))
        ok = front & cam.in_image(uv)
        seen, uv = seen[ok], uv[ok]
        pick = np.sort(rng.permutation(len(seen))[:per_view])
        taken[seen[pick]] = True
        if len(pick) == 0:
            continue
        img = synthesize_view(moved, cam, fill_radius, scan_id, frame=back)
        mask = depth_edge_mask(img, grad_thresh * coarse.scale)
        parts.append(match_view(img, mask, uv[pick], seen[pick], noise, rng))
    return concat_matches(parts), chosen
