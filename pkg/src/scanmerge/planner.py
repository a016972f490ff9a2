"""Laser scanning location planning.

Candidate stations cast evenly spread rays into the surface mesh. Each
station is scored by the mean facet score of the facets it sees, where a facet
score is its own area plus the areas of facets whose centers lie closer than
``r_f``. Stations are then picked greedily, trading summed scores against
pairwise overlap (IoU of seen-facet sets), until the selected stations cover a
fraction ``t_c`` of everything visible from any candidate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .geometry import TriMesh
from .raycast import RayCaster

log = logging.getLogger(__name__)

DEFAULT_N_RAYS = 1000
DEFAULT_R_F = 0.1
DEFAULT_T_C = 1.0 / 8.0

Denominator = Literal["candidate", "literal"]


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class PotentialLocation:
    index: int
    position: np.ndarray


@dataclass(frozen=True)
class VisibilityRecord:
    index: int
    facets: frozenset
    facet_scores: dict = field(default_factory=dict)
    score: float = 0.0

    @property
    def n_facets(self) -> int:
        return len(self.facets)


@dataclass
class PlanResult:
    selected: list[int]
    coverage_trace: list[float]
    objective_trace: list[float]
    scores: list[float]
    t_c: float
    denominator: str = "candidate"

    @property
    def n_selected(self) -> int:
        return len(self.selected)

    @property
    def coverage(self) -> float:
        return self.coverage_trace[-1] if self.coverage_trace else 0.0

    def to_dict(self) -> dict:
        finite = lambda x: x if math.isfinite(x) else None  # noqa: E731
        return {
            "selected": list(self.selected),
            "n_selected": self.n_selected,
            "coverage": self.coverage,
            "coverage_trace": list(self.coverage_trace),
            "objective_trace": [finite(x) for x in self.objective_trace],
            "scores": list(self.scores),
            "t_c": self.t_c,
            "denominator": self.denominator,
        }


def sample_sphere_directions(n_r: int) -> np.ndarray:
    """``n_r`` near-uniform unit vectors on a golden-angle spiral.

    Heights are spaced so that every point owns an equal-area latitude band,
    which makes the construction deterministic and nearly uniform.
    """
    if n_r < 1:
        raise ValueError("n_r must be at least 1")
    k = np.arange(n_r, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / n_r
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = k * (math.pi * (3.0 - math.sqrt(5.0)))
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def cast_visibility(mesh: TriMesh, loc: PotentialLocation | np.ndarray, dirs: np.ndarray,
                    caster: Optional[RayCaster] = None) -> frozenset:
    """Set of facets that are the nearest hit of at least one ray."""
    caster = caster or RayCaster(mesh)
    origin = loc.position if isinstance(loc, PotentialLocation) else np.asarray(loc, float)
    _, f = caster.cast(np.broadcast_to(origin, dirs.shape), dirs)
    return frozenset(int(i) for i in np.unique(f[f >= 0]))


def facet_neighbors(mesh: TriMesh, m: int, r_f: float) -> np.ndarray:
    """Facets (excluding ``m``) whose centers are strictly closer than ``r_f``."""
    c = mesh.centers
    cand = np.asarray(mesh.center_tree.query_ball_point(c[m], r_f), dtype=np.int64)
    cand = cand[cand != m]
    d = np.linalg.norm(c[cand] - c[m], axis=1)
    return np.sort(cand[d < r_f])


def facet_score(mesh: TriMesh, m: int, r_f: float = DEFAULT_R_F) -> float:
    if not 0 <= m < mesh.n_facets:
        raise ValueError(f"facet index {m} out of range")
    if r_f <= 0:
        raise ValueError("r_f must be positive")
    nb = facet_neighbors(mesh, m, r_f)
    return float(mesh.areas[m] + mesh.areas[nb].sum())


def facet_scores(mesh: TriMesh, facets: Iterable[int], r_f: float = DEFAULT_R_F) -> dict:
    return {int(m): facet_score(mesh, int(m), r_f) for m in sorted(facets)}


def location_score(scores: dict | Sequence[float]) -> float:
    """Mean facet score; 0 for a station that sees nothing."""
    vals = list(scores.values()) if isinstance(scores, dict) else list(scores)
    if not vals:
        return 0.0
    return float(math.fsum(vals) / len(vals))


def pairwise_iou(a: frozenset | set, b: frozenset | set) -> float:
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def visibility_records(mesh: TriMesh, locations: Sequence[PotentialLocation] | np.ndarray,
                       n_rays: int = DEFAULT_N_RAYS, r_f: float = DEFAULT_R_F,
                       caster: Optional[RayCaster] = None) -> list[VisibilityRecord]:
    caster = caster or RayCaster(mesh)
    dirs = sample_sphere_directions(n_rays)
    if not isinstance(locations[0], PotentialLocation):
        locations = [PotentialLocation(i, np.asarray(p, float)) for i, p in enumerate(locations)]
    cache: dict[int, float] = {}
    records = []
    for loc in locations:
        F = cast_visibility(mesh, loc, dirs, caster)
        sc = {}
        for m in sorted(F):
            if m not in cache:
                cache[m] = facet_score(mesh, m, r_f)
            sc[m] = cache[m]
        records.append(VisibilityRecord(loc.index, F, sc, location_score(sc)))
    return records


def _ratio_key(num: float, den: float) -> tuple[int, float]:
    # den == 0 is the limit den -> 0+: rank above every finite ratio, then by numerator
    if den == 0:
        return (1, num)
    return (0, num / den)


def plan_locations(records: Sequence[VisibilityRecord], t_c: float = DEFAULT_T_C,
                   denominator: Denominator = "candidate") -> PlanResult:
    """Greedy scan-station selection.

    Args:
        records: one visibility record per candidate, ordered by index.
        t_c: coverage fraction at which selection stops, in (0, 1].
        denominator: ``"candidate"`` penalizes a candidate by its IoU with the
            already selected stations; ``"literal"`` sums the IoUs of every
            selected station against all unselected ones, which is the same
            for every candidate.
    """
    if not 0 < t_c <= 1:
        raise ValueError("t_c must lie in (0, 1]")
    if denominator not in ("candidate", "literal"):
        raise ValueError(f"unknown denominator mode {denominator!r}")
    n = len(records)
    sets = [r.facets for r in records]
    A = [r.score for r in records]
    universe = frozenset().union(*sets) if sets else frozenset()
    if not universe:
        raise PlanningError("no candidate sees any facet")
    total = len(universe)

    iou_cache: dict[tuple[int, int], float] = {}

    def iou(i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        if key not in iou_cache:
            iou_cache[key] = pairwise_iou(sets[i], sets[j])
        return iou_cache[key]

    first = int(np.argmax(A))
    selected = [first]
    covered = set(sets[first])
    coverage = [len(covered) / total]
    objective = [A[first]]

    while coverage[-1] < t_c:
        remaining = [i for i in range(n) if i not in selected]
        if not remaining or all(A[i] == 0 for i in remaining):
            log.info("planning stopped early at coverage %.4f", coverage[-1])
            break
        sum_a = math.fsum(A[i] for i in selected)
        sel_pairs = math.fsum(iou(selected[a], selected[b])
                              for a in range(len(selected)) for b in range(a + 1, len(selected)))
        if denominator == "literal":
            shared = sel_pairs + math.fsum(iou(m, r) for m in selected for r in remaining)
        best, best_key = -1, None
        for c in remaining:
            num = sum_a + A[c]
            if denominator == "literal":
                den = shared
            else:
                den = sel_pairs + math.fsum(iou(m, c) for m in selected)
            key = _ratio_key(num, den)
            if best_key is None or key > best_key:
                best, best_key = c, key
        selected.append(best)
        covered |= sets[best]
        coverage.append(len(covered) / total)
        objective.append(math.inf if best_key[0] else best_key[1])

    return PlanResult(selected, coverage, objective, list(A), t_c, denominator)
