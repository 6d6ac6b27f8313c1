import math

import numpy as np
import pytest

from conftest import build_clean_pair, gt_point_pairs, gt_problem

from semloc.errors import DomainError, InsufficientElementsError, InsufficientMatchesError
from semloc.geometry import Pose, geodesic_angle, rotation_exp
from semloc.matcher import MatchList
from semloc.pose import (
    CoarseResult,
    PnplProblem,
    RansacConfig,
    RefineConfig,
    direct_pnpl,
    gauss_newton_hessian,
    p3p,
    pnpl_value_grad,
    ransac_p3p,
    weighted_pnpl,
)

TIGHT = RefineConfig(max_iterations=300, grad_tol=1e-12)


def random_pose(rng, angle=2.0, span=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose(rng.uniform(0.1, angle) * axis, rng.normal(size=3) * span)


def pose_errors(a: Pose, b: Pose):
    rte = float(np.linalg.norm(a.t - b.t))
    rre = math.degrees(geodesic_angle(a.R, b.R))
    return rte, rre


def synth_p3p_case(rng, pose):
    """Three camera-visible points and their exact bearings under pose."""
    while True:
        Q = rng.uniform(-4, 4, size=(3, 3))
        Q[:, 2] = rng.uniform(3, 12, size=3)
        if np.linalg.norm(np.cross(Q[1] - Q[0], Q[2] - Q[0])) < 1.0:
            continue
        P = pose.inverse().transform(Q)
        F = Q / np.linalg.norm(Q, axis=1, keepdims=True)
        return F, P


class TestP3P:
    def test_recovers_synthesized_pose(self):
        rng = np.random.default_rng(80)
        for _ in range(50):
            pose = random_pose(rng)
            F, P = synth_p3p_case(rng, pose)
            candidates = p3p(F, P)
            assert candidates
            best = min(candidates, key=lambda c: np.linalg.norm(c.t - pose.t))
            rte, rre = pose_errors(best, pose)
            assert rte <= 1e-6
            # the geodesic metric floors at ~sqrt(eps) through arccos
            assert rre <= 1e-5

    def test_collinear_points_empty(self):
        F = np.eye(3)
        F = F / np.linalg.norm(F, axis=1, keepdims=True)
        P = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 3.0]])
        assert p3p(F, P) == []

    def test_candidates_reproject(self):
        rng = np.random.default_rng(81)
        for _ in range(30):
            pose = random_pose(rng)
            F, P = synth_p3p_case(rng, pose)
            for cand in p3p(F, P):
                for i in range(3):
                    q = cand.R @ P[i] + cand.t
                    ang = math.acos(np.clip(F[i] @ q / np.linalg.norm(q), -1, 1))
                    assert ang < 1e-6

    def test_duplicate_bearing_empty(self):
        F = np.array([[0, 0, 1.0], [0, 0, 1.0], [0.1, 0, 1.0]])
        F = F / np.linalg.norm(F, axis=1, keepdims=True)
        P = np.array([[0, 0, 5.0], [1, 0, 5.0], [0, 1, 5.0]])
        assert p3p(F, P) == []


class TestPnplGradient:
    def random_problem(self, rng, m=5, n=6, m2=3, n2=4):
        F = rng.normal(size=(m, 3)) + np.array([0, 0, 4.0])
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        Lf = rng.normal(size=(m2, 3)) + np.array([0, 0, 4.0])
        Lf /= np.linalg.norm(Lf, axis=1, keepdims=True)
        V2 = rng.normal(size=(m2, 3))
        V2 /= np.linalg.norm(V2, axis=1, keepdims=True)
        V3 = rng.normal(size=(n2, 3))
        V3 /= np.linalg.norm(V3, axis=1, keepdims=True)
        return PnplProblem(
            F,
            rng.uniform(-8, 8, size=(n, 3)),
            rng.uniform(0, 1, size=(m, n)),
            Lf,
            V2,
            rng.uniform(-8, 8, size=(n2, 3)),
            V3,
            rng.uniform(0, 1, size=(m2, n2)),
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(82)
        worst = 0.0
        for _ in range(100):
            problem = self.random_problem(rng)
            x = np.concatenate([random_pose(rng, angle=2.5).r, rng.normal(size=3) * 3])
            # keep away from residual plateaus caused by points at the camera
            _, g = pnpl_value_grad(problem, x)
            num = np.zeros(6)
            eps = 1e-6
            for k in range(6):
                dx = np.zeros(6)
                dx[k] = eps
                fp, _ = pnpl_value_grad(problem, x + dx)
                fm, _ = pnpl_value_grad(problem, x - dx)
                num[k] = (fp - fm) / (2 * eps)
            rel = np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-5

    def test_gauss_newton_hessian_is_psd(self):
        rng = np.random.default_rng(83)
        for _ in range(20):
            problem = self.random_problem(rng)
            x = np.concatenate([random_pose(rng).r, rng.normal(size=3)])
            H = gauss_newton_hessian(problem, x)
            assert np.allclose(H, H.T, atol=1e-12)
            assert np.linalg.eigvalsh(H).min() >= -1e-10


class TestRefinement:
    def test_ground_truth_plans_are_fixed_point(self):
        pair = build_clean_pair(seed=100)
        problem = gt_problem(pair)
        v0, _ = pnpl_value_grad(problem, pair.gt_pose.params)
        assert v0 <= 1e-12
        refined = weighted_pnpl(problem, pair.gt_pose, TIGHT)
        rte, rre = pose_errors(refined, pair.gt_pose)
        assert rte <= 1e-8 and rre <= 1e-8

    def test_perturbed_init_recovers(self):
        rng = np.random.default_rng(84)
        for seed in range(5):
            pair = build_clean_pair(seed=200 + seed)
            problem = gt_problem(pair)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            init = Pose(
                pair.gt_pose.r + math.radians(5.0) * axis,
                pair.gt_pose.t + rng.normal(size=3) * 0.5 / math.sqrt(3),
            )
            refined = weighted_pnpl(problem, init, TIGHT)
            rte, rre = pose_errors(refined, pair.gt_pose)
            assert rte < 1e-4
            assert rre < 1e-4

    def test_descent_property(self):
        rng = np.random.default_rng(85)
        pair = build_clean_pair(seed=300)
        problem = gt_problem(pair)
        for _ in range(10):
            init = Pose(pair.gt_pose.r + rng.normal(size=3) * 0.3, pair.gt_pose.t + rng.normal(size=3))
            refined = weighted_pnpl(problem, init, RefineConfig())
            f_init, _ = pnpl_value_grad(problem, init.params)
            f_out, _ = pnpl_value_grad(problem, refined.params)
            assert f_out <= f_init + 1e-15

    def test_non_finite_objective_rejected(self):
        # finite-but-huge weights on residual-2 terms overflow to inf
        problem = PnplProblem(
            np.array([[0.0, 0.0, 1.0]] * 4),
            np.array([[0.0, 0.0, -5.0]] * 4),
            np.eye(4) * 1e308,
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 0)),
        )
        with pytest.raises(DomainError):
            weighted_pnpl(problem, Pose.identity(), TIGHT)


class TestDirectPnpl:
    def test_four_point_recovery_from_identity(self):
        # camera at the origin looking down +z in the map frame, so identity
        # is a sane starting point
        rng = np.random.default_rng(86)
        for _ in range(10):
            gt = Pose(rng.normal(size=3) * 0.2, rng.normal(size=3) * 0.4)
            P = rng.uniform(-4, 4, size=(4, 3))
            P[:, 2] = rng.uniform(6, 14, size=4)
            Q = P @ gt.R.T + gt.t
            assert np.all(Q[:, 2] > 0.5)
            F = Q / np.linalg.norm(Q, axis=1, keepdims=True)
            problem = PnplProblem(
                F, P, np.eye(4),
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 0)),
            )
            est = direct_pnpl(problem, Pose.identity(), TIGHT)
            rte, rre = pose_errors(est, gt)
            assert rte < 1e-4 and rre < 1e-4

    def test_two_ones_in_a_row_rejected(self):
        rng = np.random.default_rng(87)
        F = rng.normal(size=(2, 3)) + [0, 0, 3]
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        W = np.array([[1.0, 1.0], [0.0, 0.0]])
        problem = PnplProblem(
            F, rng.uniform(-2, 2, size=(2, 3)), W,
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 0)),
        )
        with pytest.raises(DomainError):
            direct_pnpl(problem, Pose.identity())

    def test_too_few_correspondences_rejected(self):
        rng = np.random.default_rng(88)
        F = rng.normal(size=(3, 3)) + [0, 0, 3]
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        problem = PnplProblem(
            F, rng.uniform(-2, 2, size=(3, 3)), np.eye(3),
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 0)),
        )
        with pytest.raises(InsufficientElementsError):
            direct_pnpl(problem, Pose.identity())

    def test_line_constraint_disambiguates_p3p(self):
        # find a twofold-ambiguous P3P instance, then check the added pole
        # line term separates the true pose from the spurious candidate
        rng = np.random.default_rng(89)
        found = 0
        for _ in range(200):
            gt = random_pose(rng)
            F, P = synth_p3p_case(rng, gt)
            candidates = p3p(F, P)
            spurious = [c for c in candidates if np.linalg.norm(c.t - gt.t) > 1e-3]
            if not spurious:
                continue
            found += 1
            # one pole: base sampled in front of the camera, vertical direction
            base_cam = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(4, 10)])
            base = gt.inverse().transform(base_cam)
            v3 = np.array([0.0, 0.0, -1.0])
            qb = gt.transform(base)
            qo = gt.transform(base + v3)
            if qb[2] < 0.5 or qo[2] < 0.5:
                continue
            fb = qb / np.linalg.norm(qb)
            v2 = qo / np.linalg.norm(qo) - fb
            v2 /= np.linalg.norm(v2)
            problem = PnplProblem(
                F, P, np.eye(3),
                fb.reshape(1, 3), v2.reshape(1, 3), base.reshape(1, 3), v3.reshape(1, 3), np.ones((1, 1)),
            )
            v_gt, _ = pnpl_value_grad(problem, gt.params)
            v_bad, _ = pnpl_value_grad(problem, spurious[0].params)
            assert v_gt <= 1e-10
            assert v_bad > 1e-8
            # selecting the candidate by the full objective picks the truth
            best = min(candidates, key=lambda c: pnpl_value_grad(problem, c.params)[0])
            est = direct_pnpl(problem, best, TIGHT)
            rte, rre = pose_errors(est, gt)
            assert rte < 1e-4 and rre < 1e-4
            if found >= 5:
                break
        assert found >= 1

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(90)
        pair = build_clean_pair(seed=400)
        problem = gt_problem(pair)
        init = Pose(pair.gt_pose.r + 0.05, pair.gt_pose.t + 0.2)
        base = weighted_pnpl(problem, init, TIGHT)
        for _ in range(3):
            rp = rng.permutation(problem.point_weights.shape[0])
            cp = rng.permutation(problem.point_weights.shape[1])
            rl = rng.permutation(problem.line_weights.shape[0])
            cl = rng.permutation(problem.line_weights.shape[1])
            shuffled = PnplProblem(
                problem.point_bearings[rp],
                problem.point_targets[cp],
                problem.point_weights[np.ix_(rp, cp)],
                problem.line_bearings[rl],
                problem.line_dirs_2d[rl],
                problem.line_points[cl],
                problem.line_dirs_3d[cl],
                problem.line_weights[np.ix_(rl, cl)],
            )
            v0, g0 = pnpl_value_grad(problem, init.params)
            v1, g1 = pnpl_value_grad(shuffled, init.params)
            assert v0 == v1
            assert np.array_equal(g0, g1)
            out = weighted_pnpl(shuffled, init, TIGHT)
            assert np.array_equal(out.params, base.params)


def match_list_from_pairs(pairs2d3d, probs=None):
    idx2 = np.array([p[0] for p in pairs2d3d])
    idx3 = np.array([p[1] for p in pairs2d3d])
    p = np.asarray(probs) if probs is not None else np.full(len(idx2), 0.5)
    order = np.argsort(-p, kind="stable")
    return MatchList(idx2[order], idx3[order], p[order])


class TestRansac:
    def true_matches(self, pair):
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(pair.gt_correspondence))]

    def test_noise_free_full_inliers(self):
        pair = build_clean_pair(seed=500)
        matches = match_list_from_pairs(self.true_matches(pair))
        res = ransac_p3p(matches, pair.elements2d, pair.submap, RansacConfig(seed=1))
        assert res.inlier_rate == 1.0
        rte, _ = pose_errors(res.pose, pair.gt_pose)
        assert rte < 1e-4
        assert not res.low_confidence

    def test_half_outliers_recovery(self):
        recovered = 0
        for seed in range(20):
            pair = build_clean_pair(seed=600 + seed)
            true = self.true_matches(pair)
            rng = np.random.default_rng(seed)
            n3 = len(pair.submap.elements)
            junk = []
            while len(junk) < len(true):
                i, _ = true[rng.integers(len(true))]
                j = int(rng.integers(n3))
                cls2 = pair.elements2d[i].class_id
                if pair.submap.elements[j].class_id != cls2:
                    continue
                if pair.gt_correspondence[i, j] == 1:
                    continue
                junk.append((i, j))
            matches = match_list_from_pairs(true + junk)
            res = ransac_p3p(matches, pair.elements2d, pair.submap, RansacConfig(seed=seed))
            rte, _ = pose_errors(res.pose, pair.gt_pose)
            if rte < 0.1:
                recovered += 1
        assert recovered >= 19

    def test_all_outliers_low_confidence(self):
        # dense view: with one bogus pair per 2D element, the self-consistent
        # sample only ever explains ~4 of them
        pair = build_clean_pair(seed=700, n_poles=28, n_signs=42, min_visible=14)
        rng = np.random.default_rng(7)
        n3 = len(pair.submap.elements)
        # scramble each element differently so no rigid pose can fit the map
        from semloc.elements import SubMap, Element3D

        moved = [
            Element3D(
                e.point * np.array([1 + 0.5 * k, 1 - 0.03 * k, 1.0]) + np.array([40.0 * k, -25.0 * k, 0.0]),
                e.direction,
                e.semantic,
            )
            for k, e in enumerate(pair.submap.elements)
        ]
        pts = np.stack([e.point for e in moved])
        origin = pts.mean(axis=0)
        radius = float(np.hypot(pts[:, 0] - origin[0], pts[:, 1] - origin[1]).max()) + 1.0
        shifted = SubMap(tuple(moved), origin, radius)
        pairs = [(i, int(rng.integers(n3))) for i in range(len(pair.elements2d))]
        assert len(pairs) >= 14
        matches = match_list_from_pairs(pairs)
        res = ransac_p3p(matches, pair.elements2d, shifted, RansacConfig(seed=3, max_iterations=200))
        assert res.low_confidence

    def test_too_few_matches(self):
        pair = build_clean_pair(seed=701)
        matches = match_list_from_pairs(self.true_matches(pair)[:3])
        with pytest.raises(InsufficientMatchesError):
            ransac_p3p(matches, pair.elements2d, pair.submap)

    def test_deterministic(self):
        pair = build_clean_pair(seed=702)
        matches = match_list_from_pairs(self.true_matches(pair))
        a = ransac_p3p(matches, pair.elements2d, pair.submap, RansacConfig(seed=5))
        b = ransac_p3p(matches, pair.elements2d, pair.submap, RansacConfig(seed=5))
        assert np.array_equal(a.pose.params, b.pose.params)
        assert np.array_equal(a.inlier_indices, b.inlier_indices)

    def test_inliers_reverify(self):
        pair = build_clean_pair(seed=703)
        matches = match_list_from_pairs(self.true_matches(pair))
        res = ransac_p3p(matches, pair.elements2d, pair.submap, RansacConfig(seed=6))
        # hard assertion inside ransac_p3p already, sanity check fields here
        assert len(res.inlier_indices) == round(res.inlier_rate * len(matches))
