"""Nearest-hit ray casting against a :class:`TriMesh`.

A bounding volume hierarchy (median split on the longest centroid axis) is
built in numpy and traversed by a numba kernel. :func:`cast_rays_brute` is the
exhaustive reference used by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import BARY_EPS, PARALLEL_TOL, TriMesh

LEAF_SIZE = 4


@dataclass(frozen=True, eq=False)
class BVH:
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray  # -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray  # facet ids permuted into leaf order


def build_bvh(mesh: TriMesh, leaf_size: int = LEAF_SIZE) -> BVH:
    tri = mesh.triangles()
    tmin = tri.min(axis=1)
    tmax = tri.max(axis=1)
    cent = mesh.centers
    order = np.arange(mesh.n_facets, dtype=np.int64)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node() -> int:
        for lst in (node_min, node_max):
            lst.append(None)
        for lst in (left, right, start, count):
            lst.append(-1)
        return len(left) - 1

    # iterative build; each stack entry is (node, lo, hi) over ``order``
    root = new_node()
    stack = [(root, 0, len(order))]
    while stack:
        node, lo, hi = stack.pop()
        ids = order[lo:hi]
        node_min[node] = tmin[ids].min(axis=0)
        node_max[node] = tmax[ids].max(axis=0)
        if hi - lo <= leaf_size:
            start[node], count[node] = lo, hi - lo
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic
        perm = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = ids[perm]
        mid = (lo + hi) // 2
        ln, rn = new_node(), new_node()
        left[node], right[node] = ln, rn
        stack.append((rn, mid, hi))
        stack.append((ln, lo, mid))

    return BVH(
        node_min=np.array(node_min, dtype=np.float64),
        node_max=np.array(node_max, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=order,
    )


@numba.njit(cache=True)
def _slab(o, inv, d, bmin, bmax):
    tnear = -np.inf
    tfar = np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return np.inf, -np.inf
        else:
            t1 = (bmin[a] - o[a]) * inv[a]
            t2 = (bmax[a] - o[a]) * inv[a]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tnear:
                tnear = t1
            if t2 < tfar:
                tfar = t2
    return tnear, tfar


@numba.njit(cache=True)
def _hit(o, d, v0, e1, e2, nn):
    # Möller-Trumbore with edge-inclusive barycentric bounds
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if abs(det) <= PARALLEL_TOL * nn:
        return -1.0
    inv = 1.0 / det
    sx = o[0] - v0[0]
    sy = o[1] - v0[1]
    sz = o[2] - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return -1.0
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return -1.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t < 0.0:
        return -1.0
    return t


@numba.njit(cache=True)
def _cast_bvh(origins, dirs, tmax, v0, e1, e2, nn, node_min, node_max, left, right,
              start, count, order, out_t, out_f):
    stack = np.empty(256, np.int64)
    inv = np.empty(3)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else 0.0
        best = tmax[r]
        besti = -1
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            tn, tf = _slab(o, inv, d, node_min[node], node_max[node])
            if tn > tf or tf < 0.0 or tn > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    t = _hit(o, d, v0[f], e1[f], e2[f], nn[f])
                    if t >= 0.0 and (t < best or (t == best and besti >= 0 and f < besti)):
                        best = t
                        besti = f
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out_f[r] = besti
        out_t[r] = best if besti >= 0 else np.inf


@numba.njit(cache=True)
def _cast_brute(origins, dirs, tmax, v0, e1, e2, nn, out_t, out_f):
    for r in range(origins.shape[0]):
        best = tmax[r]
        besti = -1
        for f in range(v0.shape[0]):
            t = _hit(origins[r], dirs[r], v0[f], e1[f], e2[f], nn[f])
            if t >= 0.0 and t < best:
                best = t
                besti = f
        out_f[r] = besti
        out_t[r] = best if besti >= 0 else np.inf


class RayCaster:
    """Nearest-hit queries against a fixed mesh.

    Hits are accepted for ``0 <= t < tmax``; ties at equal distance go to the
    lowest facet index.
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        tri = mesh.triangles()
        self._v0 = np.ascontiguousarray(tri[:, 0])
        self._e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
        self._e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
        self._nn = np.linalg.norm(np.cross(self._e1, self._e2), axis=1)
        self.bvh = build_bvh(mesh)

    def _prep(self, origins, dirs, tmax):
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        origins = np.ascontiguousarray(
            np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape))
        if tmax is None:
            tmax = np.full(len(dirs), np.inf)
        tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64),
                                                    (len(dirs),)))
        return origins, dirs, tmax

    def cast(self, origins, dirs, tmax=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(distance, facet)``; misses give ``(inf, -1)``."""
        origins, dirs, tmax = self._prep(origins, dirs, tmax)
        out_t = np.empty(len(dirs))
        out_f = np.empty(len(dirs), dtype=np.int64)
        b = self.bvh
        _cast_bvh(origins, dirs, tmax, self._v0, self._e1, self._e2, self._nn,
                  b.node_min, b.node_max, b.left, b.right, b.start, b.count, b.order,
                  out_t, out_f)
        return out_t, out_f

    def cast_brute(self, origins, dirs, tmax=None) -> tuple[np.ndarray, np.ndarray]:
        origins, dirs, tmax = self._prep(origins, dirs, tmax)
        out_t = np.empty(len(dirs))
        out_f = np.empty(len(dirs), dtype=np.int64)
        _cast_brute(origins, dirs, tmax, self._v0, self._e1, self._e2, self._nn, out_t, out_f)
        return out_t, out_f

    def visible(self, origin, targets, rel_eps: float = 1e-6) -> np.ndarray:
        """Whether each target point is unoccluded from ``origin``."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        v = targets - np.asarray(origin, dtype=np.float64)
        dist = np.linalg.norm(v, axis=1)
        ok = dist > 0
        dirs = np.zeros_like(v)
        dirs[ok] = v[ok] / dist[ok, None]
        tmax = dist * (1.0 - rel_eps)
        t, _ = self.cast(np.broadcast_to(origin, v.shape), dirs, tmax)
        return ok & ~np.isfinite(t)


def cast_rays_brute(mesh: TriMesh, origins, dirs, tmax=None):
    """Exhaustive nearest-hit reference (pure numpy, no acceleration)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    tmax = np.full(len(dirs), np.inf) if tmax is None else np.broadcast_to(tmax, (len(dirs),))
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    nn = np.linalg.norm(np.cross(e1, e2), axis=1)
    out_t = np.full(len(dirs), np.inf)
    out_f = np.full(len(dirs), -1, dtype=np.int64)
    for r in range(len(dirs)):
        d = dirs[r]
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        valid = np.abs(det) > PARALLEL_TOL * nn
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = origins[r] - v0
            u = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            v = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
        hit = (valid & (u >= -BARY_EPS) & (u <= 1 + BARY_EPS) & (v >= -BARY_EPS)
               & (u + v <= 1 + BARY_EPS) & (t >= 0) & (t < tmax[r]))
        if hit.any():
            cand = np.flatnonzero(hit)
            k = cand[np.argmin(t[cand])]
            out_t[r], out_f[r] = t[k], k
    return out_t, out_f
