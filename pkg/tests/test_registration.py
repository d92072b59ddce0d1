import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mixlsq.experiments import PsrExperimentConfig, generate_landmarks, generate_psr_instance, make_rng
from mixlsq.gmm import negative_log_likelihood
from mixlsq.registration import (
    OutlierModel,
    PointSetPair,
    RegistrationBlock,
    RigidTransform,
    build_registration_problem,
    cartesian_to_polar,
    measure,
    measurement_covariance,
    plus_pose3,
    plus_se2,
    polar_jacobian,
    polar_to_cartesian,
    rot2,
    transform_error,
)
from mixlsq.solver import RankDeficientError, evaluate_total_cost, recover_covariance, solve


def grid_pair(dim, transform, cov=0.01):
    # well separated landmarks: neighbouring components barely interact
    if dim == 2:
        pts = np.array([[x, y] for x in (-20.0, 0.0, 20.0) for y in (-20.0, 20.0)])
    else:
        pts = np.array([[x, y, z] for x in (-20.0, 20.0) for y in (-20.0, 20.0) for z in (-20.0, 20.0)])
    covs = np.repeat(np.eye(dim)[None] * cov, len(pts), axis=0)
    moving = transform.inverse_apply(pts)
    return PointSetPair(pts, covs, moving, covs.copy(), transform)


def se2_fd(block, state, h=1e-7):
    cols = []
    for j in range(3):
        d = np.zeros(3)
        d[j] = h
        cols.append((block.residual(plus_se2(state, d))[0] - block.residual(plus_se2(state, -d))[0]) / (2 * h))
    return np.stack(cols, 1)


def pose3_fd(block, state, h=1e-7):
    cols = []
    for j in range(6):
        d = np.zeros(6)
        d[j] = h
        cols.append((block.residual(plus_pose3(state, d))[0] - block.residual(plus_pose3(state, -d))[0]) / (2 * h))
    return np.stack(cols, 1)


class TestGeometry:
    def test_transform_round_trip(self):
        t = RigidTransform(rot2(0.3), np.array([1.0, -2.0]))
        p = np.array([[1.0, 2.0], [3.0, -1.0]])
        assert np.allclose(t.inverse_apply(t.apply(p)), p)
        assert np.allclose(RigidTransform.from_state(t.to_state()).rotation, t.rotation)

    def test_pose3_state(self):
        rot = Rotation.from_rotvec([0.1, -0.2, 0.3]).as_matrix()
        t = RigidTransform(rot, np.array([1.0, 2.0, 3.0]))
        back = RigidTransform.from_state(t.to_state())
        assert np.allclose(back.rotation, rot)

    def test_pose3_plus_stays_orthonormal(self):
        state = RigidTransform.identity(3).to_state()
        for _ in range(50):
            state = plus_pose3(state, np.full(6, 0.1))
        r = state[3:].reshape(3, 3)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_error_2d(self):
        truth = RigidTransform(rot2(math.radians(10)), np.array([0.3, 0.4]))
        vec, et, er = transform_error(RigidTransform.identity(2), truth)
        assert et == pytest.approx(0.5)
        assert er == pytest.approx(10.0)
        assert vec[2] == pytest.approx(math.radians(10))

    def test_error_3d_geodesic(self):
        rot = Rotation.from_rotvec([0.0, 0.0, math.radians(7)]).as_matrix()
        _, et, er = transform_error(RigidTransform.identity(3), RigidTransform(rot, np.zeros(3)))
        assert et == 0.0
        assert er == pytest.approx(7.0)


class TestBlocks:
    def test_combined_covariance_additive(self):
        block = RegistrationBlock([1.0, 0.0], np.eye(2) * 0.04, np.zeros((1, 2)), np.eye(2)[None] * 0.01, "msm")
        assert np.allclose(block.combined_covariances(np.eye(2))[0], np.eye(2) * 0.05)

    def test_combined_covariance_rotates_moving_part(self):
        cov = np.diag([0.04, 0.01])
        block = RegistrationBlock([1.0, 0.0], cov, np.zeros((1, 2)), np.zeros((1, 2, 2)), "msm")
        r = rot2(math.pi / 2)
        assert np.allclose(block.combined_covariances(r)[0], np.diag([0.01, 0.04]))

    def test_outlier_component_appended(self):
        block = RegistrationBlock([1.0, 0.0], np.eye(2) * 0.04, np.zeros((3, 2)), np.repeat(np.eye(2)[None], 3, 0),
                                  "msm", outlier=OutlierModel(0.1, 10.0))
        block.refresh(np.zeros(3))
        assert block.mixture.size == 4
        assert block.mixture.weights[-1] == pytest.approx(0.1)
        assert np.allclose(block.mixture.covariances()[-1], np.eye(2) * 100.04)

    def test_residual_jacobian_2d(self):
        block = RegistrationBlock([2.0, -1.0], np.eye(2), np.zeros((1, 2)), np.eye(2)[None], "mm")
        state = np.array([0.3, -0.2, 0.4])
        assert np.allclose(block.residual(state)[1], se2_fd(block, state), atol=1e-7)

    def test_residual_jacobian_3d(self):
        block = RegistrationBlock([2.0, -1.0, 0.5], np.eye(3), np.zeros((1, 3)), np.eye(3)[None], "mm")
        rot = Rotation.from_rotvec([0.2, -0.1, 0.3]).as_matrix()
        state = RigidTransform(rot, np.array([0.1, 0.2, 0.3])).to_state()
        assert np.allclose(block.residual(state)[1], pose3_fd(block, state), atol=1e-7)


class TestProblem:
    def test_rejects_dimension_mismatch(self):
        pair = PointSetPair(np.zeros((2, 2)), np.repeat(np.eye(2)[None], 2, 0),
                            np.zeros((2, 3)), np.repeat(np.eye(3)[None], 2, 0))
        with pytest.raises(ValueError):
            build_registration_problem(pair, "msm")

    def test_rejects_empty_and_dcs(self):
        empty = PointSetPair(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 2)), np.zeros((0, 2, 2)))
        with pytest.raises(ValueError):
            build_registration_problem(empty, "msm")
        pair = grid_pair(2, RigidTransform.identity(2))
        with pytest.raises(ValueError):
            build_registration_problem(pair, "dcs")

    def test_single_point_translation(self):
        truth = RigidTransform(np.eye(2), np.array([0.3, -0.2]))
        fixed = np.array([[4.0, 1.0]])
        cov = np.eye(2)[None] * 0.01
        pair = PointSetPair(fixed, cov, truth.inverse_apply(fixed), cov.copy(), truth)
        problem = build_registration_problem(pair, "msm")
        rep = solve(problem, np.zeros(3))
        est = RigidTransform.from_state(rep.state)
        assert np.allclose(est.apply(pair.moving), fixed, atol=1e-6)
        with pytest.raises(RankDeficientError):
            recover_covariance(problem, rep.state)

    @pytest.mark.parametrize("loss", ["mm", "sm", "msm"])
    @pytest.mark.parametrize("dim", [2, 3])
    def test_identity_truth_recovered(self, loss, dim):
        pair = grid_pair(dim, RigidTransform.identity(dim))
        problem = build_registration_problem(pair, loss)
        start = RigidTransform.identity(dim).to_state()
        rep = solve(problem, start)
        _, et, er = transform_error(RigidTransform.from_state(rep.state), pair.transform)
        assert et < 1e-6
        assert math.radians(er) < 1e-6

    @pytest.mark.parametrize("dim", [2, 3])
    def test_small_transform_recovered(self, dim):
        if dim == 2:
            truth = RigidTransform(rot2(math.radians(8)), np.array([0.4, -0.3]))
        else:
            truth = RigidTransform(Rotation.from_euler("xyz", [0.05, -0.04, 0.07]).as_matrix(),
                                   np.array([0.2, -0.3, 0.1]))
        pair = grid_pair(dim, truth)
        rep = solve(build_registration_problem(pair, "msm"), RigidTransform.identity(dim).to_state())
        _, et, er = transform_error(RigidTransform.from_state(rep.state), truth)
        assert et < 1e-6
        assert er < 1e-4

    @pytest.mark.parametrize("loss", ["sm", "msm"])
    def test_cost_at_truth_is_nll_plus_offset(self, loss):
        cfg = PsrExperimentConfig(dimension=2, add_noise=False)
        truth = RigidTransform(rot2(0.1), np.array([0.2, 0.1]))
        lm = generate_landmarks(cfg, make_rng(3, 0))
        pair = generate_psr_instance(cfg, make_rng(3, 1), lm, truth)
        problem = build_registration_problem(pair, loss, batched=False)
        state = truth.to_state()
        problem.refresh(state)
        expected = sum(float(negative_log_likelihood(b.mixture, b.residual(state)[0])) + b.loss.log_normalization
                       for b in problem.blocks)
        assert evaluate_total_cost(problem, state) == pytest.approx(expected, abs=1e-8)

    def test_mm_cost_at_noise_free_truth(self):
        pair = grid_pair(2, RigidTransform(rot2(0.2), np.array([0.1, 0.1])))
        problem = build_registration_problem(pair, "mm", batched=False)
        state = pair.transform.to_state()
        problem.refresh(state)
        # whitened part vanishes; only the constant entries remain
        expected = sum(b.loss.log_normalization - float(b.mixture.log_scalings[i])
                       for i, b in enumerate(problem.blocks))
        assert evaluate_total_cost(problem, state) == pytest.approx(expected, abs=1e-8)


class TestMeasurementModel:
    def test_polar_round_trip(self):
        p = np.array([[3.0, 4.0], [-1.0, 2.0]])
        assert np.allclose(polar_to_cartesian(cartesian_to_polar(p)), p)
        q = np.array([[3.0, 4.0, 1.0], [-1.0, 2.0, -5.0]])
        assert np.allclose(polar_to_cartesian(cartesian_to_polar(q)), q)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_polar_jacobian_by_differences(self, dim):
        polar = np.array([[7.0, 0.4, 0.2][:dim]])
        jac = polar_jacobian(polar)[0]
        h = 1e-6
        num = np.stack([(polar_to_cartesian(polar + h * e)[0] - polar_to_cartesian(polar - h * e)[0]) / (2 * h)
                        for e in np.eye(dim)], 1)
        assert np.allclose(jac, num, atol=1e-8)

    def test_covariance_at_bearing_zero(self):
        cov = measurement_covariance(np.array([[10.0, 0.0]]), 0.2, math.radians(3))[0]
        assert np.allclose(cov, np.diag([0.04, (10 * math.radians(3)) ** 2]))

    def test_covariance_matches_sampling(self):
        rng = np.random.default_rng(0)
        point = np.array([[10.0, 0.0]])
        angle = math.radians(3)
        polar = cartesian_to_polar(point) + rng.standard_normal((100_000, 2)) * [0.2, angle]
        sample = np.cov(polar_to_cartesian(polar).T)
        model = measurement_covariance(point, 0.2, angle)[0]
        assert sample[0, 0] == pytest.approx(model[0, 0], rel=0.03)
        assert sample[1, 1] == pytest.approx(model[1, 1], rel=0.03)
        assert abs(sample[0, 1]) < 0.005

    def test_noise_free_measure(self):
        p = np.array([[1.0, 2.0], [3.0, -4.0]])
        measured, cov = measure(p, None, 0.2, 0.05)
        assert np.allclose(measured, p)
        assert cov.shape == (2, 2, 2)


class TestBatchedProblem:
    @pytest.mark.parametrize("loss", ["mm", "sm", "msm"])
    @pytest.mark.parametrize("dim", [2, 3])
    @pytest.mark.parametrize("outlier", [None, OutlierModel()])
    def test_matches_block_form(self, loss, dim, outlier):
        cfg = PsrExperimentConfig(dimension=dim)
        pair = generate_psr_instance(cfg, make_rng(7, dim))
        fast = build_registration_problem(pair, loss, outlier=outlier)
        ref = build_registration_problem(pair, loss, outlier=outlier, batched=False)
        rng = make_rng(8, dim)
        state = RigidTransform.identity(dim).to_state()
        for _ in range(4):
            step = rng.normal(0.0, 0.1, size=fast.tangent_dim)
            state = fast.plus(state, step)
            fast.refresh(state)
            ref.refresh(state)
            v1, j1 = fast.evaluate(state)
            v2, j2 = ref.evaluate(state)
            assert np.allclose(v1, v2, rtol=1e-10, atol=1e-12)
            assert np.allclose(j1, j2, rtol=1e-9, atol=1e-12)
            assert evaluate_total_cost(fast, state) == pytest.approx(evaluate_total_cost(ref, state), rel=1e-12)

    def test_log_normalization_identity(self):
        cfg = PsrExperimentConfig(dimension=2)
        pair = generate_psr_instance(cfg, make_rng(9, 0))
        problem = build_registration_problem(pair, "msm")
        state = np.array([0.1, -0.2, 0.05])
        problem.refresh(state)
        ref = build_registration_problem(pair, "msm", batched=False)
        ref.refresh(state)
        got = problem.log_normalizations(state)
        want = [b.loss.log_normalization for b in ref.blocks]
        assert np.allclose(got, want, rtol=1e-12)

    def test_same_solution_as_block_form(self):
        cfg = PsrExperimentConfig(dimension=3)
        pair = generate_psr_instance(cfg, make_rng(10, 0))
        x0 = RigidTransform.identity(3).to_state()
        a = solve(build_registration_problem(pair, "msm"), x0)
        b = solve(build_registration_problem(pair, "msm", batched=False), x0)
        assert a.iterations == b.iterations
        assert np.allclose(a.state, b.state, atol=1e-9)
