import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanmerge.geometry import (
    CameraIntrinsics,
    CameraView,
    ColoredPointCloud,
    RigidPose,
    Sim3Transform,
    look_at_rotation,
    random_rotation,
)
from scanmerge.scene import SceneSpec, generate_scene, simulate_scan
from scanmerge.synth import (
    NO_DEPTH,
    DisjointViewError,
    NoDepthError,
    SynthesisError,
    SynthImage,
    UnreliableDepthError,
    build_cube_rig,
    depth_edge_mask,
    matching_partners,
    pixel_to_point,
    pixels_to_points,
    render_cube,
    select_aerial_views,
    synthesize_view,
)


def cloud(points, colors=None):
    p = np.atleast_2d(np.asarray(points, float))
    c = np.full((len(p), 3), 200, np.uint8) if colors is None else np.asarray(colors, np.uint8)
    return ColoredPointCloud(p, c)


def depth_image(depth):
    depth = np.asarray(depth, float)
    h, w = depth.shape
    cam = CameraView(CameraIntrinsics(w / 2, w / 2, w / 2, h / 2, w, h),
                     RigidPose(np.eye(3), np.zeros(3)), "virtual")
    return SynthImage(np.zeros((h, w, 3), np.uint8), depth, cam)


def view_at(center, forward, res=64, f=None):
    R = look_at_rotation(np.asarray(forward, float))
    f = f or res / 2
    c = np.asarray(center, float)
    return CameraView(CameraIntrinsics(f, f, res / 2, res / 2, res, res), RigidPose(R, -R @ c),
                      "captured-aerial")


@pytest.fixture(scope="module")
def room():
    spec = SceneSpec(length=8, width=6, height=3, ceiling=True, pillars=[[3.0, 3.0, 0.6]],
                     n_points=200)
    b = generate_scene(spec)
    return b, simulate_scan(b, b.stations[0], 0.01)


def ray_cast_depths(bundle, scan, img):
    """True camera-frame depth at the center of every filled pixel, from the mesh."""
    cam = img.camera
    jj, ii = np.nonzero(img.valid)
    k = cam.intrinsics
    d_cam = np.c_[(ii + 0.5 - k.cx) / k.fx, (jj + 0.5 - k.cy) / k.fy, np.ones(len(ii))]
    d_cam /= np.linalg.norm(d_cam, axis=1)[:, None]
    d_world = d_cam @ cam.pose.rotation @ scan.pose.rotation.T
    t, f = bundle.caster.cast(np.broadcast_to(scan.pose.translation, d_world.shape), d_world)
    return jj, ii, t * d_cam[:, 2], t, f


class TestCubeRig:
    def test_resolution_two(self):
        k = build_cube_rig(resolution=2).views[0].intrinsics
        assert (k.fx, k.fy, k.cx, k.cy) == (1, 1, 1, 1)

    def test_axes(self):
        rig = build_cube_rig((1, 2, 3), 16)
        A = np.array([v.axis for v in rig.views])
        dots = np.round(A @ A.T, 12)
        assert set(np.unique(dots)) <= {-1.0, 0.0, 1.0}
        assert np.allclose(np.abs(A).sum(0), 2)
        assert all(np.allclose(v.center, [1, 2, 3]) for v in rig.views)

    def test_plus_z_center(self):
        rig = build_cube_rig((1, 1, 1), 64)
        names = list(rig.names)
        p = np.array([[1, 1, 1 + 2.5]])
        uv, front = rig.views[names.index("+z")].project(p)
        assert front[0] and np.allclose(uv[0], [32, 32])
        _, back = rig.views[names.index("-z")].project(p)
        assert not back[0]

    def test_bad_resolution(self):
        with pytest.raises(ValueError):
            build_cube_rig(resolution=1)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_cube_completeness(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=(200, 3))
        rig = build_cube_rig(resolution=32)
        front = np.zeros(len(p), int)
        inside = np.zeros(len(p), int)
        for v in rig.views:
            uv, f = v.project(p)
            front += f
            inside += f & v.in_image(uv)
        assert np.all((front >= 1) & (front <= 3))
        assert np.all(inside >= 1)


class TestSynthesize:
    def test_single_point(self):
        cam = view_at([0, 0, 0], [0, 0, 1])
        img = synthesize_view(cloud([[0.1, 0.2, 4.0]], [[10, 20, 30]]), cam, fill_radius=3)
        assert img.seed.sum() == 1
        j, i = np.argwhere(img.seed)[0]
        assert img.depth[j, i] == 4.0 and tuple(img.rgb[j, i]) == (10, 20, 30)
        jj, ii = np.nonzero(img.valid)
        assert np.all(np.hypot(jj - j, ii - i) <= 3)
        assert np.all(img.depth[img.valid] == 4.0)

    def test_z_buffer(self):
        cam = view_at([0, 0, 0], [0, 0, 1])
        img = synthesize_view(cloud([[0, 0, 6.0], [0, 0, 3.0]], [[1, 1, 1], [9, 9, 9]]), cam, 0)
        j, i = np.argwhere(img.seed)[0]
        assert img.depth[j, i] == 3.0 and tuple(img.rgb[j, i]) == (9, 9, 9)

    def test_disjoint(self):
        with pytest.raises(DisjointViewError):
            synthesize_view(cloud([[0, 0, -1.0]]), view_at([0, 0, 0], [0, 0, 1]))

    def test_empty(self):
        with pytest.raises(SynthesisError):
            synthesize_view(ColoredPointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8)),
                            view_at([0, 0, 0], [0, 0, 1]))

    def test_buffers_consistent(self, room):
        _, scan = room
        for img in render_cube(scan.cloud, build_cube_rig(resolution=128)):
            assert img is not None
            assert np.all(img.depth[img.valid] > 0)
            assert not img.rgb[~img.valid].any()
            assert not img.rgb.flags.writeable

    def test_deterministic(self, room):
        _, scan = room
        rig = build_cube_rig(resolution=96)
        a, b = render_cube(scan.cloud, rig), render_cube(scan.cloud, rig)
        for x, y in zip(a, b):
            assert np.array_equal(x.depth, y.depth) and np.array_equal(x.rgb, y.rgb)

    def test_depth_against_ray_cast(self, room):
        b, scan = room
        ok = total = 0
        for img in render_cube(scan.cloud, build_cube_rig(resolution=512)):
            _, _, z, t, f = ray_cast_depths(b, scan, img)
            hit = f >= 0
            err = np.abs(img.depth[img.valid] - z)
            ok += np.count_nonzero(hit & (err <= 2 * 0.01 * t))
            total += np.count_nonzero(hit)
        assert ok / total >= 0.99

    def test_unproject_reproject(self, room):
        _, scan = room
        img = render_cube(scan.cloud, build_cube_rig(resolution=64))[0]
        jj, ii = np.nonzero(img.valid)
        uv = np.c_[ii + 0.5, jj + 0.5]
        pts, ok = pixels_to_points(img, uv)
        assert ok.all()
        back, front = img.camera.project(pts)
        assert front.all() and np.abs(back - uv).max() <= 0.5


class TestEdgeMask:
    def test_constant(self):
        assert not depth_edge_mask(depth_image(np.full((20, 30), 2.0)), 0.05).any()

    def test_two_half_planes(self):
        d = np.full((20, 30), 1.0)
        d[:, 15:] = 5.0
        m = depth_edge_mask(depth_image(d), 0.5)
        want = np.zeros_like(m)
        want[:, 14 - 2:16 + 2] = True
        assert np.array_equal(m, want)

    def test_sentinel_masked(self):
        d = np.full((10, 10), 1.0)
        d[5, 5] = NO_DEPTH
        m = depth_edge_mask(depth_image(d), 0.5, dilation=0)
        assert m[5, 5] and m.sum() == 1

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            depth_edge_mask(depth_image(np.ones((4, 4))), 0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), t1=st.floats(0.01, 1), t2=st.floats(0.01, 1))
    def test_monotone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        d = np.cumsum(rng.exponential(0.1, (16, 16)), axis=1)
        d[rng.random(d.shape) < 0.05] = NO_DEPTH
        img = depth_image(d)
        lo, hi = sorted((t1, t2))
        assert not (depth_edge_mask(img, hi) & ~depth_edge_mask(img, lo)).any()

    def test_catches_bad_depths_in_room(self, room):
        b, scan = room
        bad_total = caught = 0
        for img in render_cube(scan.cloud, build_cube_rig(resolution=512)):
            jj, ii, z, t, f = ray_cast_depths(b, scan, img)
            bad = (np.abs(img.depth[jj, ii] - z) > 3 * 0.01 * t) | (f < 0)
            m = depth_edge_mask(img, 0.05)[jj, ii]
            bad_total += bad.sum()
            caught += (bad & m).sum()
        assert bad_total > 0
        assert caught / bad_total >= 0.95


class TestPixelToPoint:
    def test_seed_pixel_single_point(self, rng):
        T = Sim3Transform(1.5, random_rotation(rng), rng.normal(size=3))
        p = np.array([0.3, -0.2, 5.0])
        cam = view_at([0, 0, 0], [0, 0, 1], res=128)
        img = synthesize_view(cloud([p]), cam, 0, frame=T)
        j, i = np.argwhere(img.seed)[0]
        got = pixel_to_point(img, (i + 0.5, j + 0.5))
        spread = p[2] * math.sqrt(0.5) / cam.intrinsics.fx * T.scale
        assert np.linalg.norm(got - T.apply(p)) <= spread + 1e-12

    def test_center_of_plus_z(self, rng):
        pose = RigidPose(random_rotation(rng), rng.normal(size=3))
        T = Sim3Transform.from_rigid(pose)
        rig = build_cube_rig(resolution=64)
        face = rig.views[list(rig.names).index("+z")]
        img = synthesize_view(cloud([[0, 0, 2.0]]), face, 0, frame=T)
        assert np.allclose(pixel_to_point(img, (32, 32)), pose.apply([0, 0, 2.0]))

    def test_errors(self):
        d = np.full((8, 8), 1.0)
        d[0, 0] = NO_DEPTH
        img = depth_image(d)
        with pytest.raises(NoDepthError):
            pixel_to_point(img, (0.5, 0.5))
        mask = np.zeros((8, 8), bool)
        mask[4, 4] = True
        with pytest.raises(UnreliableDepthError):
            pixel_to_point(img, (4.2, 4.7), mask)
        with pytest.raises(IndexError):
            pixel_to_point(img, (8.0, 1.0))

    def test_vectorized_matches_scalar(self, room):
        _, scan = room
        img = render_cube(scan.cloud, build_cube_rig(resolution=64))[2]
        mask = depth_edge_mask(img)
        uv = np.random.default_rng(0).uniform(-2, 66, (300, 2))
        pts, ok = pixels_to_points(img, uv, mask)
        for q in range(len(uv)):
            try:
                want = pixel_to_point(img, uv[q], mask)
            except (IndexError, SynthesisError):
                assert not ok[q]
            else:
                assert ok[q] and np.allclose(pts[q], want, atol=1e-12)

    def test_every_seed_pixel_recovers_its_point(self, room):
        _, scan = room
        rig = build_cube_rig(resolution=256)
        worst = 0.0
        for img, cam in zip(render_cube(scan.cloud, rig), rig.views):
            uv, front = cam.project(scan.cloud.points)
            ins = front & cam.in_image(uv)
            idx = np.flatnonzero(ins)
            ij = np.floor(uv[idx]).astype(int)
            z = cam.depth(scan.cloud.points[idx])
            is_seed_point = np.isclose(img.depth[ij[:, 1], ij[:, 0]], z, rtol=0, atol=0)
            idx, ij, z = idx[is_seed_point], ij[is_seed_point], z[is_seed_point]
            got, ok = pixels_to_points(img, ij + 0.5)
            assert ok.all()
            err = np.linalg.norm(got - scan.cloud.points[idx], axis=1)
            spread = z * math.sqrt(0.5) / cam.intrinsics.fx
            assert np.all(err <= spread + 1e-9)
            worst = max(worst, float((err / spread).max()))
        assert worst > 0.5

    def test_random_pixels_on_mesh(self, room):
        b, scan = room
        rng = np.random.default_rng(3)
        rig = build_cube_rig(resolution=512)
        faces = render_cube(scan.cloud, rig, frame=Sim3Transform.from_rigid(scan.pose))
        good = total = 0
        for img in faces:
            jj, ii = np.nonzero(img.valid)
            pick = rng.choice(len(jj), size=10_000 // 6, replace=False)
            uv = np.c_[ii[pick], jj[pick]] + rng.random((len(pick), 2))
            pts, ok = pixels_to_points(img, uv)
            o = scan.pose.translation
            d = pts - o
            r = np.linalg.norm(d, axis=1)
            t, f = b.caster.cast(np.broadcast_to(o, d.shape), d / r[:, None])
            good += np.count_nonzero(ok & (f >= 0) & (np.abs(t - r) <= 2 * 0.01 * r))
            total += len(pick)
        assert good / total >= 0.95


class TestAerialSelection:
    def test_single_visible(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
        cams = [view_at([0, 0, -10], [0, 0, -1]), view_at([0, 0, -10], [0, 0, 1]),
                view_at([0, 0, 10], [0, 0, 1])]
        assert select_aerial_views(pts, cams, 1) == [1]

    def test_separation(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
        cams = [view_at([0, 0, -10], [0, 0, 1]), view_at([0, 0, -10], [0, 0, 1]),
                view_at([0, -10, -10], [0, 1, 1])]
        sel = select_aerial_views(pts, cams, 2)
        assert sorted(sel) != [0, 1]
        assert not np.allclose(cams[sel[0]].axis, cams[sel[1]].axis)

    def test_errors(self):
        pts = np.zeros((3, 3))
        with pytest.raises(SynthesisError):
            select_aerial_views(pts, [view_at([0, 0, 5], [0, 0, 1])], 1)
        with pytest.raises(ValueError):
            select_aerial_views(pts, [], 1)
        with pytest.raises(ValueError):
            select_aerial_views(pts, [view_at([0, 0, -5], [0, 0, 1])], 0)

    def test_union_beats_single(self, default_bundle):
        b = default_bundle
        scan = simulate_scan(b, b.stations[1], 0.03)
        pts = scan.pose.apply(scan.cloud.points) * b.spec.sfm_scale
        aerial = [c for c in b.cameras if c.label == "captured-aerial"]
        sel = select_aerial_views(pts, aerial, 5)
        seen = np.zeros(len(pts), bool)
        for i in sel:
            uv, f = aerial[i].project(pts)
            seen |= f & aerial[i].in_image(uv)
        for c in aerial:
            uv, f = c.project(pts)
            assert seen.sum() >= (f & c.in_image(uv)).sum()


class TestPartners:
    def test_limits_inclusive(self):
        ref = view_at([0, 0, 0], [1, 0, 0])
        cams = [view_at([5, 0, 0], [1, 0, 0]), view_at([5.01, 0, 0], [1, 0, 0]),
                view_at([0, 0, 0], [1, 1, 0]), view_at([0, 0, 0], [1, 1.01, 0]),
                view_at([0, 1, 0], [-1, 0, 0])]
        assert matching_partners(ref, cams, 5.0, 45.0) == [0, 2]
