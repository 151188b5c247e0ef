import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gauss_align.geometry import RigidTransform
from gauss_align.metrics import (MetricsReport, MetricThresholds, PairMetrics, correspondence_rmse,
                                 feature_matching_recall, inlier_ratio, patch_inlier_ratio, pose_errors,
                                 registration_rmse_recall, rr_outdoor)

from conftest import random_transform, seeds
from oracles import (brute_fmr, brute_inlier_ratio, brute_pir, brute_pose_errors, brute_rmse, brute_rr_outdoor,
                     metric_fixture)

I = RigidTransform.identity()


def rot_x(deg):
    return RigidTransform(Rotation.from_euler("x", deg, degrees=True).as_matrix(), np.zeros(3))


class TestThresholds:
    def test_defaults(self):
        th = MetricThresholds()
        assert (th.delta_corr, th.eta, th.gamma_rmse, th.zeta, th.rre_max, th.rte_max) == (0.1, 0.05, 0.2, 0.05,
                                                                                            3.0, 1.5)

    @pytest.mark.parametrize("name", ["delta_corr", "eta", "gamma_rmse", "zeta", "rre_max", "rte_max"])
    def test_positive(self, name):
        with pytest.raises(ValueError, match=name):
            MetricThresholds(**{name: 0.0})


class TestInlierRatio:
    def test_exact(self, rng):
        P = rng.normal(size=(10, 3))
        T = random_transform(rng)
        c = np.stack([np.arange(10)] * 2, 1)
        assert inlier_ratio(c, P, T.apply(P), T) == 1.0

    def test_one_displaced(self):
        P = np.eye(4, 3)
        Q = P.copy()
        Q[2] += [0.2, 0, 0]
        assert inlier_ratio([[0, 0], [1, 1], [2, 2], [3, 3]], P, Q, I, 0.1) == 0.75

    def test_infinite_threshold(self, rng):
        P, Q = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)) * 100
        assert inlier_ratio([[0, 1], [2, 3], [4, 0]], P, Q, I, np.inf) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="no correspondences"):
            inlier_ratio([], np.zeros((2, 3)), np.zeros((2, 3)), I)
        with pytest.raises(IndexError):
            inlier_ratio([[0, 5]], np.zeros((2, 3)), np.zeros((2, 3)), I)


class TestFMR:
    def test_examples(self):
        assert feature_matching_recall([1, 1, 1]) == 1.0
        assert feature_matching_recall([0.04, 0.06], 0.05) == 0.5
        assert feature_matching_recall([0.0, 0.3], 0.0) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            feature_matching_recall([])


class TestRMSE:
    def test_exact_is_success(self, rng):
        P = rng.normal(size=(8, 3))
        T = random_transform(rng)
        c = np.stack([np.arange(8)] * 2, 1)
        rmses, rr = registration_rmse_recall([(c, P, T.apply(P), T)])
        assert rmses[0] == pytest.approx(0, abs=1e-12) and rr == 1.0

    def test_single_residual_fails(self):
        rmses, rr = registration_rmse_recall([([[0, 0]], [[0, 0, 0]], [[0.3, 0, 0]], I)], 0.2)
        assert rmses[0] == pytest.approx(0.3) and rr == 0.0

    def test_divides_by_count(self):
        assert correspondence_rmse([[0, 0], [1, 1]], [[0, 0, 0], [0, 0, 0]], [[3, 0, 0], [0, 4, 0]], I) == \
            pytest.approx(np.sqrt(12.5))

    @given(seeds)
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        P, Q = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
        c = rng.integers(0, 12, (9, 2))
        T = random_transform(rng)
        assert correspondence_rmse(c[rng.permutation(9)], P, Q, T) == pytest.approx(correspondence_rmse(c, P, Q, T),
                                                                                     rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            registration_rmse_recall([([], np.zeros((1, 3)), np.zeros((1, 3)), I)])
        with pytest.raises(ValueError):
            registration_rmse_recall([])


class TestPIR:
    def test_self_paired(self, rng):
        P = rng.normal(size=(30, 3))
        patches = [P[i:i + 5] for i in range(0, 30, 5)]
        assert patch_inlier_ratio([[i, i] for i in range(6)], patches, patches, I) == 1.0

    def test_one_separated(self):
        a = [np.zeros((2, 3)), np.zeros((2, 3))]
        b = [np.zeros((2, 3)), np.full((2, 3), [1.0, 0, 0])]
        assert patch_inlier_ratio([[0, 0], [1, 1]], a, b, I, 0.05) == 0.5

    def test_infinite_threshold(self, rng):
        a = [rng.normal(size=(3, 3))]
        b = [rng.normal(size=(2, 3)) + 50]
        assert patch_inlier_ratio([[0, 0]], a, b, I, np.inf) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            patch_inlier_ratio([], [np.zeros((1, 3))], [np.zeros((1, 3))], I)
        with pytest.raises(ValueError, match="empty patch"):
            patch_inlier_ratio([[0, 0]], [np.zeros((0, 3))], [np.zeros((1, 3))], I)


class TestPoseErrors:
    def test_identical(self, rng):
        T = random_transform(rng)
        rre, rte = pose_errors(T, T)
        assert rre == pytest.approx(0, abs=1e-9) and rte == 0

    @pytest.mark.parametrize("deg", [1.0, 10.0, 90.0, 179.0])
    def test_rotation_about_x(self, deg):
        assert pose_errors(rot_x(deg), I)[0] == pytest.approx(deg, abs=1e-9)

    def test_half_turn_clamped(self):
        assert pose_errors(rot_x(180.0), I)[0] == pytest.approx(180.0)

    def test_translation(self):
        assert pose_errors(RigidTransform(np.eye(3), [3, 4, 0]), I) == (0.0, 5.0)

    @given(seeds)
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        A, B = random_transform(rng), random_transform(rng)
        r1, t1 = pose_errors(A, B)
        r2, t2 = pose_errors(B, A)
        assert r1 == pytest.approx(r2, abs=1e-9) and t1 == t2
        assert 0 <= r1 <= 180 and t1 >= 0
        # agrees with the rotation magnitude away from the arccos endpoints
        mag = np.degrees(Rotation.from_matrix(A.R.T @ B.R).magnitude())
        assert r1 == pytest.approx(mag, abs=1e-5)


class TestRROutdoor:
    def test_examples(self):
        assert rr_outdoor([(0, 0), (0, 0)]) == 1.0
        assert rr_outdoor([(2.0, 2.0)]) == 0.0
        assert rr_outdoor([(2.0, 1.0)]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            rr_outdoor([])


class TestRatiosMonotone:
    @given(seeds, st.floats(0.001, 1.0), st.floats(0.001, 1.0))
    def test_monotone_in_threshold(self, seed, a, b):
        lo, hi = sorted((a, b))
        f = metric_fixture(seed)
        assert inlier_ratio(f["corrs"], f["P"], f["Q"], f["T_gt"], lo) <= \
            inlier_ratio(f["corrs"], f["P"], f["Q"], f["T_gt"], hi)
        assert patch_inlier_ratio(f["C"], f["patches_p"], f["patches_q"], f["T_gt"], lo) <= \
            patch_inlier_ratio(f["C"], f["patches_p"], f["patches_q"], f["T_gt"], hi)
        irs = np.random.default_rng(seed).random(7)
        # FMR counts IR >= eta, so it falls as eta rises
        assert feature_matching_recall(irs, hi) <= feature_matching_recall(irs, lo)
        errs = np.random.default_rng(seed).random((7, 2)) * [5, 2]
        assert rr_outdoor(errs, lo * 5, lo * 2) <= rr_outdoor(errs, hi * 5, hi * 2)


@pytest.mark.parametrize("seed", range(20))
def test_oracle_equivalence(seed):
    f = metric_fixture(seed)
    th = MetricThresholds()
    P, Q = f["P"].tolist(), f["Q"].tolist()
    c = f["corrs"].tolist()
    ir = inlier_ratio(f["corrs"], f["P"], f["Q"], f["T_gt"], th.delta_corr)
    assert abs(ir - brute_inlier_ratio(c, P, Q, f["T_gt"], th.delta_corr)) <= 1e-12
    assert abs(correspondence_rmse(f["corrs"], f["P"], f["Q"], f["T_est"]) - brute_rmse(c, P, Q, f["T_est"])) <= 1e-12
    pir = patch_inlier_ratio(f["C"], f["patches_p"], f["patches_q"], f["T_gt"], th.zeta)
    pp = [p.tolist() for p in f["patches_p"]]
    pq = [q.tolist() for q in f["patches_q"]]
    assert abs(pir - brute_pir(f["C"].tolist(), pp, pq, f["T_gt"], th.zeta)) <= 1e-12
    got, want = pose_errors(f["T_est"], f["T_gt"]), brute_pose_errors(f["T_est"], f["T_gt"])
    assert abs(got[0] - want[0]) <= 1e-12 and abs(got[1] - want[1]) <= 1e-12
    irs = np.random.default_rng(seed).random(9) * 0.1
    assert abs(feature_matching_recall(irs, th.eta) - brute_fmr(irs.tolist(), th.eta)) <= 1e-12
    errs = np.random.default_rng(seed).random((9, 2)) * [6, 3]
    assert abs(rr_outdoor(errs) - brute_rr_outdoor(errs.tolist(), 3.0, 1.5)) <= 1e-12


class TestReport:
    def pairs(self):
        ok = [PairMetrics(f"p{i}", 0.5, 0.1, IR=0.5, RMSE=0.05) for i in range(9)]
        return ok + [PairMetrics("bad", 10.0, 0.1, IR=0.01, RMSE=0.5)]

    def test_single_failure_in_ten(self):
        rep = MetricsReport.from_pairs(self.pairs())
        assert rep.RR_outdoor == pytest.approx(0.9) and rep.RR_indoor == pytest.approx(0.9)
        assert rep.FMR == pytest.approx(0.9)

    def test_perfect(self):
        rep = MetricsReport.from_pairs([PairMetrics(f"p{i}", 0.0, 0.0) for i in range(3)])
        assert rep.RR_outdoor == 1.0 and rep.FMR is None

    def test_json_and_text(self):
        rep = MetricsReport.from_pairs(self.pairs(), skipped=["x: missing ground truth"])
        d = json.loads(rep.to_json())
        assert d["thresholds"]["rre_max"] == 3.0 and len(d["pairs"]) == 10
        assert d["skipped"] == ["x: missing ground truth"]
        text = rep.to_text()
        assert text.splitlines()[0].startswith("thresholds: delta_corr=0.1 m  eta=0.05  gamma_rmse=0.2 m")
        assert "zeta=0.05 m  rre_max=3.0 deg  rte_max=1.5 m" in text
        assert "RR_outdoor=0.900" in text


@given(seeds)
def test_rre_matches_arccos_form(seed):
    rng = np.random.default_rng(seed)
    A, B = random_transform(rng), random_transform(rng)
    c = np.clip((np.trace(A.R.T @ B.R) - 1) / 2, -1, 1)
    # the arccos form loses digits near its endpoints; compare loosely there
    assert pose_errors(A, B)[0] == pytest.approx(np.degrees(np.arccos(c)), abs=1e-6)
