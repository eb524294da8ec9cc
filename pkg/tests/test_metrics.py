"""Tests for scoring, recall, ATE, scale/gravity, and variability stats."""

import numpy as np
import pytest

from vigt.geometry import RigidPose, Rotation, Similarity, Trajectory
from vigt.metrics import (
    SequenceResult,
    apply_failure_rule,
    associate,
    ate_rmse,
    coverage_check,
    cp_recall,
    gravity_error,
    group_stats,
    pose_recall,
    scale_error,
    score,
    sequence_score,
)


def make_trajectory(positions, t0=0, dt_ns=50_000_000, rotations=None):
    n = len(positions)
    ts = t0 + dt_ns * np.arange(n, dtype=np.int64)
    if rotations is None:
        rotations = [Rotation.identity()] * n
    poses = tuple(RigidPose(r, np.asarray(p, dtype=float)) for r, p in zip(rotations, positions))
    return Trajectory(ts, poses)


class TestScore:
    def test_anchor_values_exact(self):
        for e, s in [(0.05, 100.0), (0.20, 90.0), (0.50, 75.0), (1.0, 60.0),
                     (2.0, 40.0), (5.0, 20.0), (10.0, 0.0)]:
            assert score(e) == s

    def test_clamp_below_first_anchor(self):
        assert score(0.03) == 100.0
        assert score(0.0) == 100.0

    def test_clamp_above_last_anchor(self):
        assert score(10.1) == 0.0
        assert score(np.inf) == 0.0

    def test_interpolation_between_anchors(self):
        # hand-derived: halfway between (0.20, 90) and (0.50, 75)
        assert score(0.35) == pytest.approx(82.5)

    def test_continuous_at_anchors(self):
        for e, _ in [(0.05, 0), (0.20, 0), (0.50, 0), (1.0, 0), (2.0, 0), (5.0, 0), (10.0, 0)]:
            lo = score(max(e - 1e-9, 0.0))
            hi = score(e + 1e-9)
            assert abs(lo - score(e)) < 1e-6
            assert abs(hi - score(e)) < 1e-6

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            score(-0.1)

    def test_monotone_non_increasing(self):
        es = np.linspace(0.0, 12.0, 500)
        ss = [score(float(e)) for e in es]
        assert all(b <= a + 1e-12 for a, b in zip(ss, ss[1:]))


class TestSequenceScore:
    def test_all_zero_errors(self):
        assert sequence_score([0.0, 0.0, 0.0]) == 100.0

    def test_anchor_applied_per_cp(self):
        assert sequence_score([0.20, 0.20]) == pytest.approx(90.0)

    def test_missing_cp_scores_zero(self):
        assert sequence_score([0.05, np.inf]) == pytest.approx(50.0)

    def test_empty_is_error(self):
        with pytest.raises(ValueError):
            sequence_score([])

    def test_permutation_invariant(self):
        errs = [0.1, 0.4, 2.2, np.inf, 0.9]
        assert sequence_score(errs) == pytest.approx(
            sequence_score(errs[::-1]), rel=1e-12
        )
        assert cp_recall(errs) == pytest.approx(cp_recall(errs[::-1]), rel=1e-12)


class TestCpRecall:
    def test_all_within(self):
        assert cp_recall([0.0, 0.5, 0.99]) == 100.0

    def test_half_within(self):
        assert cp_recall([0.5, 1.5]) == 50.0

    def test_all_missing(self):
        assert cp_recall([np.inf, np.inf]) == 0.0

    def test_monotone_in_tau(self):
        errs = [0.3, 0.8, 1.4, 3.0, np.inf]
        taus = [0.1, 0.5, 1.0, 2.0, 5.0]
        vals = [cp_recall(errs, t) for t in taus]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestPoseRecall:
    def test_identical_trajectories(self):
        traj = make_trajectory(np.random.default_rng(0).normal(size=(40, 3)))
        assert pose_recall(traj, traj) == 100.0

    def test_half_covered(self):
        rng = np.random.default_rng(1)
        pos = rng.normal(size=(40, 3))
        gt = make_trajectory(pos)
        est = make_trajectory(pos[:20])
        assert pose_recall(est, gt) == 50.0

    def test_large_horizontal_offset_zero(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=(30, 3))
        gt = make_trajectory(pos)
        est = make_trajectory(pos + np.array([6.0, 0.0, 0.0]))
        assert pose_recall(est, gt) == 0.0

    def test_vertical_offset_ignored(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(30, 3))
        gt = make_trajectory(pos)
        est = make_trajectory(pos + np.array([0.0, 0.0, 50.0]))
        assert pose_recall(est, gt) == 100.0

    def test_empty_gt_is_error(self):
        traj = make_trajectory(np.zeros((5, 3)))
        empty = Trajectory(np.array([], dtype=np.int64), ())
        with pytest.raises(ValueError):
            pose_recall(traj, empty)


class TestAte:
    def test_identical(self):
        traj = make_trajectory(np.random.default_rng(4).normal(size=(50, 3)))
        assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)

    def test_sim3_transform_absorbed(self):
        rng = np.random.default_rng(5)
        pos = rng.normal(scale=5.0, size=(50, 3))
        gt = make_trajectory(pos)
        g = Similarity(1.8, Rotation.exp(rng.normal(size=3)), rng.normal(size=3))
        est = gt.transformed(g)
        assert ate_rmse(est, gt, "sim3") < 1e-9

    def test_se3_does_not_absorb_scale(self):
        rng = np.random.default_rng(6)
        pos = rng.normal(scale=5.0, size=(50, 3))
        gt = make_trajectory(pos)
        est = gt.transformed(Similarity(1.5, Rotation.identity(), np.zeros(3)))
        assert ate_rmse(est, gt, "se3") > 0.5

    def test_single_offset_pose_rmse(self):
        # N equal poses except one offset by 1 m: RMSE = sqrt(1/N)
        n = 25
        pos = np.zeros((n, 3))
        pos[:, 0] = np.arange(n)  # spread along a line
        gt = make_trajectory(pos)
        est_pos = pos.copy()
        est_pos[10, 1] += 1.0
        est = make_trajectory(est_pos)
        # se3 alignment would partially absorb the offset; to probe the raw
        # RMSE definition we align two identical clouds then inject the error
        fit_err = ate_rmse(est, gt, "se3")
        # the closed-form fit re-centers, so compare against the oracle that
        # does the same: brute-force RMSE after optimal rigid alignment
        from vigt.alignment import umeyama_init

        fit = umeyama_init(list(zip(est_pos, pos)))
        t_se3 = Similarity(1.0, fit.rotation, pos.mean(0) - fit.rotation.apply(est_pos.mean(0)))
        aligned = np.stack([t_se3.apply(p) for p in est_pos])
        oracle = np.sqrt(np.mean(np.sum((aligned - pos) ** 2, axis=1)))
        assert fit_err == pytest.approx(float(oracle), abs=1e-12)
        assert fit_err == pytest.approx(np.sqrt(1.0 / n), rel=0.2)

    def test_too_few_pairs(self):
        a = make_trajectory(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            ate_rmse(a, a)


class TestScaleGravity:
    def test_identity(self):
        t = Similarity.identity()
        assert scale_error(t) == 0.0
        assert gravity_error(t) == 0.0

    def test_paper_scale_value(self):
        t = Similarity(1.00222, Rotation.identity(), np.zeros(3))
        assert scale_error(t) == pytest.approx(0.222, abs=1e-9)

    def test_one_degree_about_x(self):
        t = Similarity(1.0, Rotation.exp([np.deg2rad(1.0), 0.0, 0.0]), np.zeros(3))
        assert gravity_error(t) == pytest.approx(1.0, abs=1e-9)

    def test_yaw_invisible_to_gravity(self):
        t = Similarity(1.0, Rotation.exp([0.0, 0.0, 1.2]), np.zeros(3))
        assert gravity_error(t) == pytest.approx(0.0, abs=1e-9)


class TestCoverage:
    def test_full_span_valid(self):
        traj = make_trajectory(np.zeros((100, 3)), dt_ns=100_000_000)  # 9.9 s
        assert coverage_check(traj, 10.0)

    def test_forty_percent_span_fails(self):
        traj = make_trajectory(np.zeros((40, 3)), dt_ns=100_000_000)  # 3.9 s
        assert not coverage_check(traj, 10.0)

    def test_empty_fails(self):
        empty = Trajectory(np.array([], dtype=np.int64), ())
        assert not coverage_check(empty, 10.0)


class TestFailureRule:
    def test_invalid_zeroes_metrics(self):
        res = SequenceResult(
            "seq", {"a": 0.1, "b": 0.2}, 95.0, 100.0, 88.0, valid=False
        )
        out = apply_failure_rule(res)
        assert out.score == 0.0
        assert out.cp_recall_1m == 0.0
        assert out.pose_recall_5m == 0.0
        assert all(np.isinf(v) for v in out.errors.values())

    def test_valid_untouched(self):
        res = SequenceResult("seq", {"a": 0.1}, 95.0, 100.0, None, valid=True)
        assert apply_failure_rule(res) is res


class TestGroupStats:
    def test_identical_runs_zero_std(self):
        mean, std = group_stats([[5.0, 5.0, 5.0], [7.0, 7.0, 7.0]])
        assert mean == 6.0
        assert std == 0.0

    def test_single_sequence_guard(self):
        mean, std = group_stats([[1.0, 2.0, 3.0]])
        assert mean == 2.0
        assert std == pytest.approx(np.sqrt(2.0 / 6.0))

    def test_two_sequences_spreadsheet_oracle(self):
        runs = [[10.0, 12.0, 11.0], [20.0, 19.0, 21.0]]
        mean, std = group_stats(runs)
        # brute-force arithmetic, written out like a spreadsheet
        m1 = (10.0 + 12.0 + 11.0) / 3.0
        m2 = (20.0 + 19.0 + 21.0) / 3.0
        ss = sum((x - m1) ** 2 for x in runs[0]) + sum((x - m2) ** 2 for x in runs[1])
        n, k = 2, 3
        expected_std = np.sqrt(ss / (k * (k - 1) * n * (n - 1)))
        assert mean == pytest.approx((m1 + m2) / 2.0)
        assert std == pytest.approx(expected_std)

    def test_fewer_than_two_runs_is_error(self):
        with pytest.raises(ValueError):
            group_stats([[1.0]])

    def test_mismatched_run_counts_is_error(self):
        with pytest.raises(ValueError):
            group_stats([[1.0, 2.0], [1.0, 2.0, 3.0]])


class TestAssociate:
    def test_exact_match(self):
        a = np.array([0, 100, 200], dtype=np.int64)
        assert associate(a, a) == [(0, 0), (1, 1), (2, 2)]

    def test_tolerance_respected(self):
        a = np.array([0, 1000], dtype=np.int64)
        b = np.array([400, 1020], dtype=np.int64)
        assert associate(a, b, tol_ns=50) == [(1, 1)]

    def test_one_to_one(self):
        a = np.array([0, 10], dtype=np.int64)
        b = np.array([4], dtype=np.int64)
        pairs = associate(a, b, tol_ns=10)
        assert pairs == [(0, 0)]
