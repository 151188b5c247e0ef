import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gauss_align.splats import (DegenerateNeighborhood, GaussianSplat, SplatSet, build_splat, build_splats,
                                estimate_normal, fit_low_rank, quat_to_rotmat, quats_to_rotmats, read_splats_jsonl,
                                rotmat_to_quat, rotmats_to_quats, splat_covariance, splat_feature,
                                write_splats_jsonl)

from conftest import random_rotation, random_transform, seeds


def anisotropic_patch(rng, n=40, scales=(1.0, 0.4, 0.05)):
    return rng.normal(size=(n, 3)) * scales


class TestNormal:
    def test_plane(self, rng):
        P = np.c_[rng.normal(size=(20, 2)), np.zeros(20)]
        np.testing.assert_allclose(estimate_normal(P), [0, 0, 1], atol=1e-12)

    def test_sign_rule(self, rng):
        P = np.c_[rng.normal(size=(20, 2)), np.zeros(20)] @ random_rotation(rng).T
        n = estimate_normal(P)
        first = n[np.flatnonzero(np.abs(n) > 1e-12)[0]]
        assert first > 0 and np.linalg.norm(n) == pytest.approx(1, abs=1e-12)

    @given(seeds)
    def test_rotated_plane(self, seed):
        rng = np.random.default_rng(seed)
        R = random_rotation(rng)
        P = np.c_[rng.normal(size=(15, 2)), np.zeros(15)] @ R.T
        assert abs(estimate_normal(P) @ R[:, 2]) == pytest.approx(1, abs=1e-9)

    def test_noisy_plane_against_lstsq(self, rng):
        xy = rng.uniform(-1, 1, size=(20, 2))
        z = 0.3 * xy[:, 0] - 0.2 * xy[:, 1] + 0.5 + rng.normal(0, 0.01, 20)
        coef = np.linalg.lstsq(np.c_[xy, np.ones(20)], z, rcond=None)[0]
        ref = np.array([coef[0], coef[1], -1.0])
        ref /= np.linalg.norm(ref)
        n = estimate_normal(np.c_[xy, z])
        truth = np.array([0.3, -0.2, -1]) / np.linalg.norm([0.3, -0.2, -1])
        assert np.degrees(np.arccos(min(1, abs(n @ truth)))) < 5
        assert np.degrees(np.arccos(min(1, abs(n @ ref)))) < 1

    @pytest.mark.parametrize("P", [np.zeros((2, 3)), np.outer(np.arange(6.0), [1, 2, 3]), np.ones((5, 3))])
    def test_degenerate(self, P):
        with pytest.raises(ValueError, match="degenerate neighborhood"):
            estimate_normal(P)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(splat_covariance([1, 0, 0, 0], np.zeros(3), 0.0, [0, 0, 1]), np.eye(3))

    def test_rotated_scaled(self):
        c = s = np.sqrt(0.5)
        r = [c, 0, 0, s]  # 90 deg about z
        Ro = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
        e3 = np.array([0, 0, 1.0])
        expect = Ro @ np.diag([4, 1, 1]) @ Ro.T + 0.01 * np.outer(e3, e3)
        got = splat_covariance(r, [np.log(4), 0, 0], 0.01, e3)
        np.testing.assert_allclose(got, expect, atol=1e-12)
        np.testing.assert_allclose(got, np.diag([1, 4, 1.01]), atol=1e-12)

    @given(seeds)
    def test_splat_invariants(self, seed):
        rng = np.random.default_rng(seed)
        P = anisotropic_patch(rng)
        g = build_splat(P.mean(0), P, 0.05)
        assert np.linalg.norm(g.r) == pytest.approx(1, abs=1e-9)
        assert np.linalg.norm(g.n) == pytest.approx(1, abs=1e-9)
        np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-12)
        np.testing.assert_allclose(g.cov, splat_covariance(g.r, g.s, g.lam, g.n), atol=1e-9)
        w = np.linalg.eigvalsh(g.cov)
        assert w.min() >= np.exp(g.s).min() * (1 - 1e-9)
        # without the normal term the covariance is the sample covariance
        np.testing.assert_allclose(g.cov - 0.05 * np.outer(g.n, g.n), np.cov(P.T, bias=True), atol=1e-9)

    @given(seeds)
    def test_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        P = anisotropic_patch(rng)
        T = random_transform(rng)
        g = build_splat(P.mean(0), P, 0.03)
        h = build_splat(T.apply(P.mean(0)), T.apply(P), 0.03)
        np.testing.assert_allclose(h.mu, T.apply(g.mu), atol=1e-9)
        np.testing.assert_allclose(h.cov, T.R @ g.cov @ T.R.T, atol=1e-6)
        np.testing.assert_allclose(abs(h.n @ (T.R @ g.n)), 1, atol=1e-9)

    def test_lambda_range(self, rng):
        P = anisotropic_patch(rng)
        with pytest.raises(ValueError):
            build_splat(P.mean(0), P, 0.2)
        assert build_splat(P.mean(0), P, 0.0, check_lambda=False).lam == 0.0

    def test_planar_patch_is_clamped(self, rng):
        P = np.c_[rng.normal(size=(10, 2)), np.zeros(10)]
        g = build_splat(P.mean(0), P, 0.01)
        assert np.all(np.isfinite(g.s)) and g.s.min() == pytest.approx(np.log(1e-8))
        assert np.linalg.eigvalsh(g.cov).min() > 0

    def test_opacity_range(self):
        with pytest.raises(ValueError):
            GaussianSplat(np.zeros(3), [1, 0, 0, 0], np.zeros(3), [0, 0, 1], 0.01, alpha=0.0)

    def test_batched_matches_scalar(self, rng):
        N = np.stack([anisotropic_patch(rng, 12) + rng.normal(size=3) for _ in range(20)])
        N[3] = np.outer(np.arange(12.0), [1, 0, 0])  # collinear, dropped
        C = N.mean(axis=1)
        cols = rng.random((20, 12, 3))
        S, keep = build_splats(C, N, 0.05, colors=cols)
        assert 3 not in keep and len(S) == 19
        for j, i in enumerate(keep):
            g = build_splat(C[i], N[i], 0.05, colors=cols[i])
            np.testing.assert_allclose(S.cov[j], g.cov, atol=1e-12)
            np.testing.assert_allclose(abs(S.r[j] @ g.r), 1, atol=1e-9)
            np.testing.assert_allclose(S.n[j], g.n, atol=1e-12)
            np.testing.assert_allclose(S.rgb[j], g.rgb, atol=1e-15)


class TestQuaternions:
    @given(seeds)
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        R = random_rotation(rng)
        q = rotmat_to_quat(R)
        assert q[0] >= 0
        np.testing.assert_allclose(quat_to_rotmat(q), R, atol=1e-12)

    def test_batched_agree(self, rng):
        R = np.stack([random_rotation(rng) for _ in range(30)])
        q = rotmats_to_quats(R)
        np.testing.assert_allclose(q, np.stack([rotmat_to_quat(r) for r in R]), atol=1e-12)
        np.testing.assert_allclose(quats_to_rotmats(q), R, atol=1e-12)


class TestSplatSet:
    def test_transform_matches_rebuild(self, rng):
        Ps = [anisotropic_patch(rng, 15) + rng.normal(size=3) * 3 for _ in range(5)]
        S = SplatSet.from_splats([build_splat(P.mean(0), P, 0.02) for P in Ps])
        T = random_transform(rng)
        St = S.transformed(T)
        for i, P in enumerate(Ps):
            g = build_splat(T.apply(P.mean(0)), T.apply(P), 0.02)
            np.testing.assert_allclose(St.cov[i], g.cov, atol=1e-9)
            np.testing.assert_allclose(St[i].cov, splat_covariance(St.r[i], St.s[i], 0.02, St.n[i]), atol=1e-9)

    def test_jsonl_roundtrip(self, rng, tmp_path):
        Ps = [anisotropic_patch(rng, 15) for _ in range(4)]
        S = SplatSet.from_splats([build_splat(P.mean(0), P, 0.02, feature=rng.random(5), colors=rng.random((15, 3)))
                                  for P in Ps])
        write_splats_jsonl(S, tmp_path / "s.jsonl")
        S2 = read_splats_jsonl(tmp_path / "s.jsonl")
        for name in ("mu", "cov", "alpha", "rgb", "feature"):
            np.testing.assert_allclose(getattr(S2, name), getattr(S, name), atol=1e-12)

    def test_scaled(self, rng):
        P = anisotropic_patch(rng)
        S = SplatSet.from_splats([build_splat(P.mean(0), P, 0.02)])
        h = S.scaled(0.5)[0]
        np.testing.assert_allclose(h.cov, S.cov[0] * 0.25, atol=1e-12)
        np.testing.assert_allclose(splat_covariance(h.r, h.s, h.lam, h.n), h.cov, atol=1e-12)


def unit_splat(mu, feature=(), alpha=1.0):
    return GaussianSplat(mu, [1, 0, 0, 0], np.zeros(3), [0, 0, 1], 0.0, alpha=alpha, feature=list(feature))


class TestSplatFeature:
    def test_identical_neighbors(self):
        g = unit_splat([1, 2, 3], [0.5, 0.1])
        f = splat_feature(unit_splat([0, 0, 0]), [g, g, g], 3)
        np.testing.assert_allclose(f.vector, np.concatenate([[1, 2, 3], g.cov.ravel(), [1], [0.5, 0.1]]))

    def test_hand_mean(self):
        f = splat_feature(unit_splat([1, 0, 0]), [unit_splat([0, 0, 0]), unit_splat([2, 0, 0])], 2)
        np.testing.assert_allclose(f.vector[:3], [1, 0, 0])
        np.testing.assert_allclose(f.vector[3:12], np.eye(3).ravel())
        assert not f.short

    def test_short_neighbor_list(self):
        f = splat_feature(unit_splat([0, 0, 0]), [unit_splat([1, 0, 0]), unit_splat([3, 0, 0])], 4)
        assert f.short and f.k_used == 2
        np.testing.assert_allclose(f.vector[:3], [2, 0, 0])

    @pytest.mark.parametrize("k", [1, 6])
    def test_k_range(self, k):
        with pytest.raises(ValueError):
            splat_feature(unit_splat([0, 0, 0]), [unit_splat([1, 0, 0])] * 6, k)

    @given(seeds, st.integers(2, 5), st.integers(0, 6))
    def test_length_and_permutation_invariance(self, seed, k, d):
        rng = np.random.default_rng(seed)
        nbrs = [unit_splat(rng.normal(size=3), rng.random(d), alpha=rng.uniform(0.1, 1)) for _ in range(8)]
        f = splat_feature(unit_splat([0, 0, 0], np.zeros(d)), nbrs, k)
        assert len(f.vector) == 13 + d and np.all(np.isfinite(f.vector))
        perm = [nbrs[i] for i in rng.permutation(8)]
        np.testing.assert_allclose(splat_feature(unit_splat([0, 0, 0]), perm, k).vector, f.vector, atol=1e-12)


class TestLowRank:
    def test_diag_rank_one(self):
        p = fit_low_rank(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(abs(p.B[:, 0]), [1, 0], atol=1e-15)
        err = np.linalg.norm(np.diag([3.0, 1.0]) - p(np.diag([3.0, 1.0])))
        assert err == pytest.approx(1.0, abs=1e-12) and p.expected_error == pytest.approx(1.0)

    def test_full_rank_exact(self, rng):
        X = rng.normal(size=(12, 7))
        assert np.linalg.norm(X - fit_low_rank(X, 7)(X)) <= 1e-9

    def test_idempotent(self, rng):
        X = rng.normal(size=(20, 10))
        p = fit_low_rank(X, 4)
        y = p(rng.normal(size=10))
        np.testing.assert_allclose(p(y), y, atol=1e-12)

    @pytest.mark.parametrize("rank", [0, 6])
    def test_rank_range(self, rank):
        with pytest.raises(ValueError):
            fit_low_rank(np.ones((5, 5)), rank)

    @given(seeds, st.integers(1, 50), st.integers(1, 50), st.data())
    def test_eckart_young(self, seed, m, n, data):
        rank = data.draw(st.integers(1, min(m, n)))
        X = np.random.default_rng(seed).normal(size=(m, n))
        p = fit_low_rank(X, rank)
        sv = np.linalg.svd(X, compute_uv=False)
        assert abs(np.linalg.norm(X - p(X)) - np.sqrt(np.sum(sv[rank:] ** 2))) <= 1e-8
