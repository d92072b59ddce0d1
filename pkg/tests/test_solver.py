import json
import math

import numpy as np
import pytest

from mixlsq.experiments import MixtureSamplingSpec, sample_plain_mixture
from mixlsq.gmm import GaussianMixture, find_global_mode, negative_log_likelihood
from mixlsq.loss import GaussianLoss, MaxMixture, MaxSumMixture, MixtureLossConfig, make_loss
from mixlsq.solver import (
    LeastSquaresProblem,
    NonFiniteCostError,
    RankDeficientError,
    ResidualBlock,
    SolverConfig,
    evaluate_total_cost,
    recover_covariance,
    solve,
)


def identity_residual(x):
    return x, np.eye(x.shape[0])


def mixture_problem(mixture, name="msm", config=MixtureLossConfig()):
    return LeastSquaresProblem([ResidualBlock(identity_residual, make_loss(name, mixture, config))])


def linear_problem():
    a = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])
    b = np.array([1.0, 2.0, 3.0])
    return LeastSquaresProblem([ResidualBlock(lambda x: (a @ x - b, a))]), a, b


class TestConfig:
    def test_defaults(self):
        c = SolverConfig()
        assert (c.max_iterations, c.initial_damping, c.damping_increase) == (200, 1e-4, 2.0)
        assert c.damping_decrease == pytest.approx(1 / 3)
        assert (c.gradient_tolerance, c.cost_change_tolerance, c.parameter_tolerance) == (1e-10, 1e-8, 1e-10)

    @pytest.mark.parametrize("kw", [{"max_iterations": 0}, {"gradient_tolerance": 0.0},
                                    {"initial_damping": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestSolve:
    def test_quadratic(self):
        p = LeastSquaresProblem([ResidualBlock(lambda x: (x - 3.0, np.eye(1)))])
        rep = solve(p, [0.0])
        assert rep.state[0] == pytest.approx(3.0, abs=1e-10)
        assert rep.iterations <= 3
        assert rep.converged

    def test_linear_least_squares(self):
        p, a, b = linear_problem()
        rep = solve(p, np.zeros(2))
        exact = np.linalg.solve(a.T @ a, a.T @ b)
        assert np.allclose(rep.state, exact, rtol=1e-9)
        assert rep.iterations <= 3

    def test_first_step_error_is_damping_sized(self):
        # one damped step lands within ~lambda0 of the normal-equation solution
        p, a, b = linear_problem()
        rep = solve(p, np.zeros(2), SolverConfig(max_iterations=1))
        exact = np.linalg.solve(a.T @ a, a.T @ b)
        rel = np.max(np.abs(rep.state - exact)) / np.max(np.abs(exact))
        assert rel < 2e-4

    def test_single_component_msm(self):
        mix = GaussianMixture.from_std([1.0], [0.5], [1.0])
        p = mixture_problem(mix)
        for x0 in np.linspace(-4, 4, 9):
            assert solve(p, [x0]).state[0] == pytest.approx(0.5, abs=1e-6)

    def test_msm_two_component_reaches_mode(self):
        rng = np.random.default_rng(21)
        mix = sample_plain_mixture(MixtureSamplingSpec(), 1, False, rng)
        mode = find_global_mode(mix)[0]
        p = mixture_problem(mix)
        errs = [abs(solve(p, [x0]).state[0] - mode) for x0 in np.linspace(-4, 4, 100)]
        assert max(errs) < 0.01

    def test_cost_history_monotone(self):
        rng = np.random.default_rng(4)
        mix = sample_plain_mixture(MixtureSamplingSpec(), 2, False, rng)
        for name in ("mm", "sm", "msm"):
            rep = solve(mixture_problem(mix, name), [3.0, -3.5])
            h = np.array(rep.cost_history)
            assert np.all(np.diff(h) <= 0)
            assert rep.final_cost <= rep.initial_cost

    def test_max_iterations_reported(self):
        mix = GaussianMixture.from_std([0.5, 0.5], [0.0, 1.0], [0.3, 2.0])
        rep = solve(mixture_problem(mix, "sm"), [3.0], SolverConfig(max_iterations=2))
        assert rep.iterations == 2
        assert rep.termination == "max-iterations"
        assert not rep.converged

    def test_report_json(self):
        rep = solve(LeastSquaresProblem([ResidualBlock(lambda x: (x - 1.0, np.eye(1)))]), [0.0])
        d = json.loads(json.dumps(rep.to_dict()))
        assert set(d) == {"iterations", "termination", "final_cost", "wall_time_us"}

    def test_non_finite_start_rejected(self):
        p = LeastSquaresProblem([ResidualBlock(lambda x: (np.array([np.nan]), np.eye(1)))])
        with pytest.raises(NonFiniteCostError):
            solve(p, [0.0])

    def test_indices_place_block_columns(self):
        p = LeastSquaresProblem(tangent_dim=2)
        p.add_block(ResidualBlock(lambda x: (x[:1] - 1.0, np.eye(1)), indices=[0]))
        p.add_block(ResidualBlock(lambda x: (x[1:] + 2.0, np.eye(1)), indices=[1]))
        rep = solve(p, np.zeros(2))
        assert np.allclose(rep.state, [1.0, -2.0], atol=1e-9)

    def test_loss_chain_rule(self):
        # residual 2x - 1 wrapped in a Gaussian loss with sqrt_info 3
        p = LeastSquaresProblem([ResidualBlock(lambda x: (2 * x - 1.0, 2 * np.eye(1)), GaussianLoss([[3.0]]))])
        _, jac = p.evaluate(np.array([0.0]))
        assert jac[0, 0] == pytest.approx(6.0)

    def test_refresh_called_after_accepted_steps(self):
        calls = []

        class Counting(ResidualBlock):
            def refresh(self, state):
                calls.append(np.array(state))

        p = LeastSquaresProblem([Counting(lambda x: (x - 2.0, np.eye(1)))])
        assert p.state_dependent
        rep = solve(p, [0.0])
        assert len(calls) == rep.successful_steps + 1


class TestTotalCost:
    def test_empty(self):
        assert evaluate_total_cost(LeastSquaresProblem(), np.zeros(1)) == 0.0

    def test_minimum(self):
        p = LeastSquaresProblem([ResidualBlock(lambda x: (x - 3.0, np.eye(1)))])
        assert evaluate_total_cost(p, np.array([3.0])) == 0.0

    def test_msm_equals_nll_plus_log_gamma(self):
        mix = GaussianMixture.from_std([0.3, 0.7], [0.0, 1.5], [0.5, 2.0])
        p = mixture_problem(mix)
        loss = p.blocks[0].loss
        for x in (-3.0, 0.2, 1.0, 4.5):
            c = evaluate_total_cost(p, np.array([x]))
            assert c == pytest.approx(float(negative_log_likelihood(mix, x)) + loss.log_normalization, abs=1e-9)

    def test_names_offending_block(self):
        p = LeastSquaresProblem([ResidualBlock(lambda x: (x, np.eye(1)), name="good"),
                                 ResidualBlock(lambda x: (np.array([np.inf]), np.eye(1)), name="bad")])
        with pytest.raises(NonFiniteCostError, match="bad"):
            evaluate_total_cost(p, np.zeros(1))


class TestCovariance:
    def test_single_gaussian(self):
        p = LeastSquaresProblem([ResidualBlock(identity_residual, GaussianLoss([[0.5]]))])
        assert recover_covariance(p, np.zeros(1))[0, 0] == pytest.approx(4.0, abs=1e-9)

    def test_linear_posterior(self):
        p, a, _ = linear_problem()
        cov = recover_covariance(p, np.zeros(2))
        assert np.allclose(cov, np.linalg.inv(a.T @ a), rtol=1e-9)

    def test_mm_is_dominant_covariance(self):
        mix = GaussianMixture.from_std([0.6, 0.4], [0.0, 3.0], [0.5, 2.0])
        p = LeastSquaresProblem([ResidualBlock(identity_residual, MaxMixture(mix))])
        assert recover_covariance(p, np.zeros(1))[0, 0] == pytest.approx(0.25)

    def test_msm_close_to_true_curvature(self):
        mix = GaussianMixture.from_std([0.5, 0.5], [0.0, 1.0], [1.0, 3.0])
        mode = find_global_mode(mix)
        h = 1e-4
        f = lambda x: float(negative_log_likelihood(mix, x))
        true_hess = (f(mode + h) - 2 * f(mode) + f(mode - h)) / h ** 2
        p = LeastSquaresProblem([ResidualBlock(identity_residual, MaxSumMixture(mix))])
        cov = recover_covariance(p, mode)[0, 0]
        assert 0.5 / true_hess <= cov <= 1.5 / true_hess

    def test_rank_deficient(self):
        p = LeastSquaresProblem([ResidualBlock(lambda x: (x[:1] + x[1:], np.array([[1.0, 1.0]])))])
        with pytest.raises(RankDeficientError) as info:
            recover_covariance(p, np.zeros(2))
        assert info.value.rank == 1
