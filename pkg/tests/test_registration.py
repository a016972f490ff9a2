import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from scanmerge.geometry import Sim3Transform, random_rotation, rotation_angle
from scanmerge.registration import (
    Correspondence3D,
    DegenerateConfigurationError,
    RegistrationError,
    ransac_sim3,
    umeyama_sim3,
)


def random_sim3(rng):
    return Sim3Transform(rng.uniform(0.5, 2.0), random_rotation(rng), rng.uniform(-5, 5, 3))


def close(a: Sim3Transform, b: Sim3Transform, tol):
    return (abs(a.scale - b.scale) < tol and rotation_angle(a.rotation.T @ b.rotation) < tol
            and np.abs(a.translation - b.translation).max() < tol)


class TestUmeyama:
    def test_aligned_is_identity(self, rng):
        p = rng.normal(size=(20, 3))
        T = umeyama_sim3(p, p)
        assert close(T, Sim3Transform.identity(), 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_exact_recovery(self, seed):
        rng = np.random.default_rng(seed)
        T = random_sim3(rng)
        src = rng.uniform(-5, 5, (10, 3))
        assert close(umeyama_sim3(src, T.apply(src)), T, 1e-9)

    def test_without_scale(self, rng):
        T = Sim3Transform(1.0, random_rotation(rng), [1, 2, 3])
        src = rng.normal(size=(10, 3))
        U = umeyama_sim3(src, Sim3Transform(1.7, T.rotation, T.translation).apply(src),
                         estimate_scale=False)
        assert U.scale == 1.0

    def test_correspondence_objects(self, rng):
        T = random_sim3(rng)
        src = rng.normal(size=(6, 3))
        pairs = [Correspondence3D(s, d) for s, d in zip(src, T.apply(src))]
        assert close(umeyama_sim3(pairs), T, 1e-9)

    def test_least_squares_optimality(self, rng):
        T = random_sim3(rng)
        src = rng.uniform(-5, 5, (50, 3))
        dst = T.apply(src) + rng.normal(0, 0.01, (50, 3))
        U = umeyama_sim3(src, dst)
        rms = np.sqrt(np.mean(np.sum((U.apply(src) - dst) ** 2, 1)))

        def resid(x):
            R = Rotation.from_rotvec(x[1:4]).as_matrix()
            return (np.exp(x[0]) * src @ R.T + x[4:] - dst).ravel()

        best = np.inf
        for _ in range(20):
            x0 = np.r_[rng.normal(0, 0.5), Rotation.random(random_state=rng).as_rotvec(),
                       rng.normal(size=3)]
            sol = least_squares(resid, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
            best = min(best, np.sqrt(np.mean(sol.fun.reshape(-1, 3) ** 2 * 3)))
        assert rms <= best + 1e-6

    @pytest.mark.parametrize("src", [
        np.zeros((4, 3)),
        np.outer(np.arange(5.0), [1, 2, 3]),
    ])
    def test_degenerate(self, src):
        with pytest.raises(DegenerateConfigurationError):
            umeyama_sim3(src, src)

    def test_too_few(self):
        with pytest.raises(DegenerateConfigurationError):
            umeyama_sim3(np.eye(3)[:2], np.eye(3)[:2])

    def test_weight_semantics(self, rng):
        src = rng.normal(size=(8, 3))
        dst = random_sim3(rng).apply(src) + rng.normal(0, 0.05, (8, 3))
        dup = umeyama_sim3(np.vstack([src, src[:1]]), np.vstack([dst, dst[:1]]))
        w = np.ones(8)
        w[0] = 2.0
        weighted = umeyama_sim3(src, dst, w)
        assert np.abs(dup.matrix() - weighted.matrix()).max() < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        T, G = random_sim3(rng), random_sim3(rng)
        src = rng.uniform(-5, 5, (12, 3))
        U = umeyama_sim3(src, G.apply(T.apply(src)))
        assert np.abs(U.matrix() - (G @ T).matrix()).max() < 1e-9 * max(1, np.abs(U.matrix()).max())


def outlier_problem(rng, n=100, frac=0.3, noise=0.0):
    T = random_sim3(rng)
    src = rng.uniform(0, 10, (n, 3))
    dst = T.apply(src) + rng.normal(0, noise, (n, 3)) if noise else T.apply(src)
    n_out = int(frac * n)
    out = rng.permutation(n)[:n_out]
    dst[out] = rng.uniform(0, 10, (n_out, 3)) * T.scale
    inl = np.setdiff1d(np.arange(n), out)
    return T, src, dst, inl


class TestRansac:
    def test_all_exact(self, rng):
        T = random_sim3(rng)
        src = rng.normal(size=(30, 3))
        rep = ransac_sim3(src, T.apply(src))
        assert close(rep.transform, T, 1e-9)
        assert len(rep.inliers) == 30 and rep.iterations == 100

    def test_outliers(self):
        rng = np.random.default_rng(2024)
        T, src, dst, inl = outlier_problem(rng)
        rep = ransac_sim3(src, dst, n_samples=100, dist_thresh=0.1, seed=0)
        assert close(rep.transform, T, 1e-6)
        assert set(inl) <= set(rep.inliers.tolist())

    def test_three_pairs(self, rng):
        T = random_sim3(rng)
        src = rng.normal(size=(3, 3))
        rep = ransac_sim3(src, T.apply(src))
        assert len(rep.inliers) == 3

    def test_failure(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0.0]])
        with pytest.raises(RegistrationError):
            ransac_sim3(src, src, n_samples=10)

    def test_bad_threshold(self, rng):
        with pytest.raises(ValueError):
            ransac_sim3(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), dist_thresh=0)

    def test_determinism_and_report(self):
        rng = np.random.default_rng(9)
        _, src, dst, _ = outlier_problem(rng, noise=0.02)
        a = ransac_sim3(src, dst, seed=4)
        b = ransac_sim3(src, dst, seed=4)
        assert a.to_dict() == b.to_dict()
        assert np.array_equal(a.inliers, b.inliers)
        r = np.linalg.norm(a.transform.apply(src[a.inliers]) - dst[a.inliers], axis=1)
        assert np.all(r < a.dist_thresh)
        assert a.inlier_rms == pytest.approx(np.sqrt(np.mean(r ** 2)), rel=1e-12)
        assert a.inlier_rms <= a.dist_thresh

    def test_degenerate_samples_not_counted(self):
        rng = np.random.default_rng(1)
        T = random_sim3(rng)
        line = np.outer(np.linspace(0, 1, 20), [1, 1, 0])
        src = np.vstack([line, rng.normal(size=(4, 3))])
        rep = ransac_sim3(src, T.apply(src), n_samples=30, seed=0)
        assert rep.iterations == 30 and rep.attempts > 30
