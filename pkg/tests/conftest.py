import numpy as np
import pytest

from scanmerge.geometry import TriMesh
from scanmerge.scene import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def default_bundle():
    return generate_scene(SceneSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def box_mesh(lo=(0, 0, 0), hi=(1, 1, 1)) -> TriMesh:
    """Closed axis-aligned box with outward-agnostic triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))


def icosahedron() -> TriMesh:
    p = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
                  [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TriMesh(v, f)


def grid_wall(x0, size=2.0, n=4, axis=0) -> TriMesh:
    """Square wall perpendicular to ``axis`` at coordinate ``x0``, n x n quads."""
    s = np.linspace(-size / 2, size / 2, n + 1)
    verts = []
    for a in s:
        for b in s:
            p = [0.0, 0.0, 0.0]
            p[axis] = x0
            others = [k for k in range(3) if k != axis]
            p[others[0]], p[others[1]] = a, b
            verts.append(p)
    f = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            f += [(a, a + 1, a + n + 2), (a, a + n + 2, a + n + 1)]
    return TriMesh(np.array(verts), np.array(f))


def merge_meshes(*meshes) -> TriMesh:
    verts, facets, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        facets.append(m.facets + off)
        off += len(m.vertices)
    return TriMesh(np.vstack(verts), np.vstack(facets))


GT_STATIONS = (0, 2, 3, 5)


def ground_truth_merge(bundle, stations=GT_STATIONS, resolution=0.02, **match_kw):
    """Zero-noise merge problem whose optimum is the simulator's truth."""
    from scanmerge.merge import problem_from_cameras
    from scanmerge.scene import simulate_matches, simulate_scan

    scans = [simulate_scan(bundle, bundle.stations[i], resolution, yaw=0.3 * k)
             for k, i in enumerate(stations)]
    kw = dict(pixel_sigma=0.0, point_sigma=0.0)
    kw.update(match_kw)
    cs = simulate_matches(bundle, scans, **kw)
    T = [s.sfm_transform(bundle.spec.sfm_scale) for s in scans]
    prob = problem_from_cameras(
        bundle.cameras, bundle.points, T,
        obs_camera=cs.obs_camera, obs_point=cs.obs_point, obs_pixel=cs.obs_pixel,
        obs_scale=cs.obs_scale, pair_scan=cs.pair_scan, pair_laser=cs.pair_laser,
        pair_point=cs.pair_point, pair_anchor=cs.pair_anchor, pair_channel=cs.pair_channel,
        pair_range=np.linalg.norm(cs.pair_laser, axis=1))
    return prob, scans, cs


@pytest.fixture(scope="session")
def gt_merge(default_bundle):
    return ground_truth_merge(default_bundle)
