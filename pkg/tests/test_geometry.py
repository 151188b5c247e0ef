import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gauss_align.geometry import (ColoredPointCloud, NeighborIndex, RigidTransform, apply_transform, knn, se3_exp,
                                  se3_log, skew, so3_exp, so3_log, vee, voxel_downsample)

from conftest import random_transform, seeds


def test_exp_of_zero_is_identity():
    T = se3_exp(np.zeros(6))
    np.testing.assert_array_equal(T.R, np.eye(3))
    np.testing.assert_array_equal(T.t, np.zeros(3))


def test_pure_translation_twist():
    T = se3_exp([0, 0, 0, 1, 2, 3])
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(T.t, [1, 2, 3], atol=1e-15)


def test_quarter_turn_against_term_by_term_rodrigues():
    w = np.array([0, 0, np.pi / 2])
    v = np.array([0.3, -1.0, 2.0])
    T = se3_exp(np.concatenate([w, v]))
    th = np.pi / 2
    K = skew(w / th)
    R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
    V = np.eye(3) + (1 - np.cos(th)) / th * K + (th - np.sin(th)) / th * K @ K
    np.testing.assert_allclose(T.R, R, atol=1e-14)
    np.testing.assert_allclose(T.t, V @ v, atol=1e-14)
    np.testing.assert_allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_log_examples():
    np.testing.assert_allclose(se3_log(RigidTransform()), np.zeros(6), atol=1e-15)
    np.testing.assert_allclose(se3_log(RigidTransform(np.eye(3), [1, 0, 0])), [0, 0, 0, 1, 0, 0], atol=1e-15)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    # axis from the eigenvector of R with eigenvalue 1
    w, V = np.linalg.eig(Rz)
    axis = np.real(V[:, np.argmin(np.abs(w - 1))])
    axis *= np.sign(axis[2])
    np.testing.assert_allclose(se3_log(RigidTransform(Rz, np.zeros(3)))[:3], axis * np.pi / 2, atol=1e-12)


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, -2, 3]])
def test_log_at_pi_roundtrips(axis):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    R = so3_exp(np.pi * a)
    w = so3_log(R)
    assert np.linalg.norm(w) == pytest.approx(np.pi, abs=1e-9)
    np.testing.assert_allclose(so3_exp(w), R, atol=1e-9)


@given(seeds, st.floats(0, np.pi))
def test_exp_log_roundtrip(seed, angle):
    rng = np.random.default_rng(seed)
    T = random_transform(rng, max_angle=angle)
    T2 = se3_exp(se3_log(T))
    np.testing.assert_allclose(T2.R, T.R, atol=1e-9)
    np.testing.assert_allclose(T2.t, T.t, atol=1e-9)


@given(seeds, st.floats(0, np.pi - 1e-3), st.floats(0, 1))
def test_log_exp_roundtrip(seed, angle, scale):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= angle / np.linalg.norm(w)
    xi = np.concatenate([w, rng.normal(size=3) * 3 * scale])
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)


def test_small_angle_branch_is_continuous():
    for th in [1e-9, 1e-7, 1e-6, 2e-6, 1e-4]:
        w = np.array([th, 0, 0])
        R = so3_exp(w)
        np.testing.assert_allclose(R, Rotation.from_rotvec(w).as_matrix(), atol=1e-15)
        np.testing.assert_allclose(so3_log(R), w, rtol=1e-6, atol=1e-18)


def test_skew_vee():
    v = np.array([1.0, -2.0, 0.5])
    S = skew(v)
    np.testing.assert_array_equal(S, -S.T)
    np.testing.assert_array_equal(vee(S), v)
    u = np.array([0.3, 0.1, -4.0])
    np.testing.assert_allclose(S @ u, np.cross(v, u))


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1, 1, -1.0]))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01)
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), [np.nan, 0, 0])


def test_composition_and_inverse(rng):
    a, b = random_transform(rng), random_transform(rng)
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).as_matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(RigidTransform.from_matrix(a.as_matrix().reshape(-1)).R, a.R)


def test_apply_transform_examples(rng):
    c = ColoredPointCloud(rng.normal(size=(20, 3)), rng.random((20, 3)))
    same = apply_transform(RigidTransform(), c)
    np.testing.assert_array_equal(same.positions, c.positions)
    T = random_transform(rng)
    back = apply_transform(T.inverse(), apply_transform(T, c))
    np.testing.assert_allclose(back.positions, c.positions, atol=1e-12)
    np.testing.assert_array_equal(back.colors, c.colors)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    one = apply_transform(RigidTransform(Rz), ColoredPointCloud([[1.0, 0, 0]]))
    np.testing.assert_allclose(one.positions[0], [0, 1, 0], atol=1e-15)


@given(seeds)
def test_apply_transform_is_an_isometry(seed):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(15, 3)) * 5
    T = random_transform(rng, max_t=100)
    Q = T.apply(P)
    D0 = np.linalg.norm(P[:, None] - P[None], axis=2)
    D1 = np.linalg.norm(Q[:, None] - Q[None], axis=2)
    np.testing.assert_allclose(D1, D0, atol=1e-9)


def test_point_cloud_sentinel_and_validation():
    c = ColoredPointCloud([[0, 0, 0], [1, 1, 1]], [[0.2, 0.3, 0.4], [0.9, 0.9, 0.9]], [True, False])
    np.testing.assert_array_equal(c.colors[1], [0, 0, 0])
    with pytest.raises(ValueError):
        ColoredPointCloud([[0, 0, 0]], [[1.5, 0, 0]])
    with pytest.raises(ValueError):
        ColoredPointCloud([[0, 0, 0], [1, 0, 0]], [[0.1, 0.1, 0.1]])
    assert not ColoredPointCloud(np.zeros((3, 3))).color_mask.any()


class TestNeighborIndex:
    def test_single_point(self):
        idx = NeighborIndex([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(knn(idx, [9, 9, 9], 3), [0])

    def test_query_equal_to_stored_point(self, rng):
        P = rng.normal(size=(50, 3))
        d, i = NeighborIndex(P).query(P[17], 4)
        assert i[0, 0] == 17 and d[0, 0] == 0.0

    def test_empty(self):
        with pytest.raises(ValueError, match="empty point set"):
            knn(NeighborIndex(np.zeros((0, 3))), [0, 0, 0], 1)

    @pytest.mark.parametrize("k", [1, 5, 17, 200])
    def test_matches_exhaustive_scan(self, rng, k):
        P = rng.normal(size=(100, 3))
        q = rng.normal(size=3)
        d = np.linalg.norm(P - q, axis=1)
        expect = np.lexsort((np.arange(len(P)), d))[:k]
        np.testing.assert_array_equal(knn(NeighborIndex(P), q, k), expect)

    def test_ties_break_by_index(self):
        # eight cube corners equidistant from the center
        P = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)[::-1]
        np.testing.assert_array_equal(knn(NeighborIndex(P), [0.5, 0.5, 0.5], 3), [0, 1, 2])

    @given(seeds, st.integers(1, 12))
    def test_grid_ties_property(self, seed, k):
        rng = np.random.default_rng(seed)
        P = rng.integers(0, 4, size=(60, 3)).astype(float)  # many exact ties
        q = rng.integers(0, 4, size=3).astype(float)
        d = np.linalg.norm(P - q, axis=1)
        expect = np.lexsort((np.arange(len(P)), d))[:k]
        np.testing.assert_array_equal(knn(NeighborIndex(P), q, k), expect)

    def test_radius(self, rng):
        P = rng.normal(size=(200, 3))
        got = NeighborIndex(P).radius(np.zeros(3), 0.8)
        d = np.linalg.norm(P, axis=1)
        np.testing.assert_array_equal(got, np.lexsort((np.arange(200), d))[: np.sum(d <= 0.8)])


class TestVoxelDownsample:
    def test_unit_cube_corners(self):
        P = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
        out = voxel_downsample(ColoredPointCloud(P), 2.0)
        np.testing.assert_allclose(out.positions, [[0.5, 0.5, 0.5]])
        assert not out.color_mask[0]

    def test_large_voxel_single_centroid(self, rng):
        P = rng.uniform(0, 1, size=(30, 3))
        out = voxel_downsample(ColoredPointCloud(P), 10.0)
        np.testing.assert_allclose(out.positions[0], P.mean(axis=0))

    def test_distinct_voxels_keep_points_in_key_order(self):
        P = np.array([[2.5, 0, 0], [0.5, 0, 0], [1.5, 0, 0]])
        out = voxel_downsample(ColoredPointCloud(P), 1.0)
        np.testing.assert_allclose(out.positions, P[[1, 2, 0]])

    def test_mean_color_over_colored_members(self):
        P = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
        C = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.5, 0.5, 0.5]])
        out = voxel_downsample(ColoredPointCloud(P, C, [True, True, False]), 1.0)
        np.testing.assert_allclose(out.colors[0], [0.5, 0.5, 0])
        assert out.color_mask[0]

    def test_rejects_bad_voxel(self):
        with pytest.raises(ValueError):
            voxel_downsample(ColoredPointCloud(np.zeros((2, 3))), 0.0)

    @given(seeds, st.floats(0.05, 3.0))
    def test_outputs_inside_their_cells(self, seed, voxel):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(80, 3)) * 2
        out = voxel_downsample(ColoredPointCloud(P), voxel)
        assert len(out) <= len(P)
        keys = np.floor(P / voxel)
        cells = np.unique(keys, axis=0)
        # centroids of points in one cell stay in that cell (up to rounding at the faces)
        lo = cells * voxel - 1e-9
        np.testing.assert_array_less(lo, out.positions + 1e-12)
        np.testing.assert_array_less(out.positions, lo + voxel + 2e-9)
