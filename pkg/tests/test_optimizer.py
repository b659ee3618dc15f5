"""
Optimizer service test suite

Run with: pytest tests/test_optimizer.py -v
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import numpy as np
import pytest
from scipy import linalg
from sklearn.linear_model import LogisticRegression

from core.models.serialization import model_to_bytes
from core.models.skpd_model import Dataset, PenaltyConfig
from core.services.evaluation_service import auc
from core.services.optimizer_service import (
    ElasticNetPenalty,
    FitReport,
    L1Penalty,
    PenalizedLogisticProblem,
    SolverConfig,
    build_A_problem,
    build_B_problem,
    build_gamma_problem,
    fit,
    initialize,
    soft_threshold,
    solve_penalized_logistic,
)
from core.services.simulation_service import SimConfig, generate, make_template
from core.services.verification_service import GRADIENT_STEP, check_block_gradients, gradient_check
from core.tensors.tensor_ops import ShapeConfig, kron
from core.utils.errors import ShapeMismatchError, SingleClassError


def random_dataset(n=40, dims=(8, 8), q=0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + dims)
    y = np.arange(n) % 2
    x[y == 1, :dims[0] // 2, :dims[1] // 2] += 0.5
    return Dataset(x, y, rng.standard_normal((n, q)))


def logistic_problem(n=80, m=6, lam=0.02, seed=0):
    rng = np.random.default_rng(seed)
    design = rng.standard_normal((n, m))
    truth = np.array([2.0, -1.5] + [0.0] * (m - 2))
    labels = (rng.random(n) < 1 / (1 + np.exp(-design @ truth))).astype(float)
    return PenalizedLogisticProblem(design, labels, np.zeros(n), L1Penalty(lam), np.zeros(m))


class TestPenalties:
    """Test proximal operators"""

    def test_soft_threshold(self):
        """Should shrink toward zero by the threshold"""
        out = soft_threshold(np.array([3.0, -0.5, 0.2, -2.0]), 1.0)
        assert np.array_equal(out, [2.0, -0.0, 0.0, -1.0])

    def test_elastic_net_prox_closed_form(self):
        """Should give soft(v, t lam alpha) / (1 + 2 t lam (1 - alpha))"""
        penalty = ElasticNetPenalty(lam=1.0, alpha=0.5)
        assert penalty.prox(np.array([3.0]), 1.0)[0] == pytest.approx(1.25)

    def test_elastic_net_prox_minimizes(self):
        """Should minimize 0.5 (w - v)^2 + t * penalty(w) on a fine grid"""
        penalty = ElasticNetPenalty(lam=0.7, alpha=0.3)
        v, t = -1.8, 0.9
        grid = np.linspace(-3, 3, 600001)
        values = 0.5 * (grid - v) ** 2 + t * 0.7 * (0.3 * np.abs(grid) + 0.7 * grid ** 2)
        assert penalty.prox(np.array([v]), t)[0] == pytest.approx(grid[np.argmin(values)], abs=1e-4)

    def test_unpenalized_coordinate(self):
        """Should leave unpenalized coordinates untouched"""
        penalty = L1Penalty(lam=10.0, unpenalized=(1,))
        out = penalty.prox(np.array([0.5, 0.5]), 1.0)
        assert out[0] == 0.0 and out[1] == 0.5
        assert penalty.value(np.array([1.0, 5.0])) == 10.0


class TestInnerSolver:
    """Test proximal gradient with backtracking"""

    def test_matches_reference_solver(self):
        """Should reach the L1 logistic optimum found by liblinear"""
        problem = logistic_problem()
        cfg = SolverConfig(inner_max_iter=20000, inner_tol=1e-10)
        solution = solve_penalized_logistic(problem, cfg)
        reference = LogisticRegression(
            penalty='l1', C=1.0 / (0.02 * problem.n), fit_intercept=False,
            solver='liblinear', tol=1e-10, max_iter=10000,
        ).fit(problem.design, problem.labels)
        reference_objective = problem.objective(reference.coef_.ravel())
        assert solution.converged
        assert solution.objective <= reference_objective + 1e-6
        assert abs(solution.objective - reference_objective) < 1e-4

    def test_stationarity_at_returned_point(self):
        """Should satisfy ||w - prox(w - step * grad)||_inf <= tol at the returned coef"""
        problem = logistic_problem(seed=1)
        cfg = SolverConfig(inner_max_iter=20000, inner_tol=1e-8)
        solution = solve_penalized_logistic(problem, cfg)
        w = solution.coef
        step = solution.step_size
        moved = problem.penalty.prox(w - step * problem.gradient(w), step) - w
        assert np.max(np.abs(moved)) <= 1e-6

    def test_never_increases_objective(self):
        """Should end at or below the warm start objective"""
        problem = logistic_problem(seed=2)
        solution = solve_penalized_logistic(problem, SolverConfig(inner_max_iter=3))
        assert solution.objective <= solution.initial_objective

    def test_budget_exhaustion_reported(self):
        """Should flag non-convergence when the budget runs out"""
        problem = logistic_problem(seed=3, lam=0.0)
        solution = solve_penalized_logistic(problem, SolverConfig(inner_max_iter=1, inner_tol=1e-12))
        assert not solution.converged
        assert solution.iterations == 1

    def test_accelerated_agrees(self):
        """Should reach the same optimum with momentum"""
        problem = logistic_problem(seed=4)
        plain = solve_penalized_logistic(problem, SolverConfig(inner_max_iter=20000, inner_tol=1e-10))
        fast = solve_penalized_logistic(
            problem, SolverConfig(inner_max_iter=20000, inner_tol=1e-10, accelerate=True)
        )
        assert fast.objective == pytest.approx(plain.objective, abs=1e-7)

    def test_gradient_matches_finite_differences(self):
        """Should agree with central differences"""
        problem = logistic_problem(seed=5)
        assert gradient_check(problem, np.random.default_rng(0)) < 1e-6

    def test_central_difference_step(self):
        """Should difference with a 1e-5 step unless told otherwise"""
        assert GRADIENT_STEP == 1e-5
        problem = logistic_problem(seed=6)
        default = gradient_check(problem, np.random.default_rng(1))
        explicit = gradient_check(problem, np.random.default_rng(1), step=1e-5)
        assert default == explicit
        assert default < 1e-6


class TestBlockProblems:
    """Test the B, A and gamma block designs"""

    def test_block_gradients(self):
        """Should pass finite-difference checks for every block"""
        for result in check_block_gradients(points=5):
            assert result.passed, result.name

    def test_block_objectives_track_model(self):
        """Should reproduce the model loss at the warm start of every block"""
        data = random_dataset(q=2)
        cfg = ShapeConfig.from_dims((8, 8), (2, 2))
        penalties = PenaltyConfig(0.05, 0.02, 0.01, 0.4)
        model = initialize(data, cfg, 2, penalties=penalties).model
        model.gamma[:] = [0.3, -0.2]
        model.intercept = 0.1
        loss = model.data_loss(data)

        problem = build_B_problem(data, model, 1)
        assert problem.loss(problem.warm_start) == pytest.approx(loss, rel=1e-10)
        assert problem.penalty.value(problem.warm_start) == pytest.approx(
            0.02 * (0.4 * np.abs(model.views[1].B).sum() + 0.6 * (model.views[1].B ** 2).sum()), rel=1e-12
        )

        problem = build_A_problem(data, model, 0)
        assert problem.loss(problem.warm_start) == pytest.approx(loss, rel=1e-10)

        problem = build_gamma_problem(data, model)
        assert problem.m == 3
        assert problem.penalty.unpenalized == (2,)
        assert problem.loss(problem.warm_start) == pytest.approx(loss, rel=1e-10)

    def test_gamma_block_skipped(self):
        """Should return None with no covariates and no intercept"""
        data = random_dataset()
        model = initialize(data, ShapeConfig.from_dims((8, 8), (2, 2)), 1).model
        assert build_gamma_problem(data, model, fit_intercept=False) is None


class TestInitialize:
    """Test spectral initialization"""

    def test_spectral_start(self):
        """Should start with orthonormal A, all-ones B and zero gamma"""
        data = random_dataset(q=3)
        cfg = ShapeConfig.from_dims((8, 8), (2, 2))
        init = initialize(data, cfg, 2)
        model = init.model
        assert init.fallback == [False, False]
        a = model.views[0].a_matrix()
        assert np.allclose(a @ a.T, np.eye(2), atol=1e-8)
        assert np.array_equal(model.views[1].B, np.ones((2,) + cfg.patch))
        assert np.array_equal(model.gamma, np.zeros(3))

    def test_single_positive_recovers_grid_pattern(self):
        """Should point A along the grid pattern of a lone positive sample"""
        rng = np.random.default_rng(3)
        a_star = rng.standard_normal((4, 4))
        x = np.stack([kron(a_star, np.ones((2, 2))).as_array(), rng.standard_normal((8, 8))])
        init = initialize(Dataset(x, [1, 0]), ShapeConfig.from_dims((8, 8), (2, 2)), 1, use_shift=False)
        a = init.model.views[0].a_matrix()[0]
        truth = a_star.ravel() / np.linalg.norm(a_star)
        assert abs(a @ truth) == pytest.approx(1.0, abs=1e-10)

    def test_two_components_span_truth(self):
        """Should span both grid patterns of rank-2 data"""
        rng = np.random.default_rng(4)
        a_true = rng.standard_normal((2, 4, 4))
        b_true = rng.standard_normal((2, 2, 2))
        components = np.stack([kron(a, b).as_array() for a, b in zip(a_true, b_true)])
        weights = rng.uniform(0.5, 2.0, size=(30, 2)) * np.array([1.0, 3.0])
        x = np.tensordot(weights, components, axes=1)
        init = initialize(Dataset(x, np.ones(30, dtype=int)), ShapeConfig.from_dims((8, 8), (2, 2)), 2,
                          use_shift=False)
        estimate = init.model.views[0].a_matrix().T
        angles = linalg.subspace_angles(estimate, a_true.reshape(2, -1).T)
        assert np.max(angles) < 1e-6

    def test_fallback_without_positives(self, caplog):
        """Should use seeded random directions when no label is positive"""
        rng = np.random.default_rng(0)
        data = Dataset(rng.standard_normal((10, 4, 4)), np.zeros(10, dtype=int))
        cfg = ShapeConfig.from_dims((4, 4), (2, 2))
        init = initialize(data, cfg, 2, use_shift=False)
        assert init.fallback == [True]
        a = init.model.views[0].a_matrix()
        assert np.allclose(a @ a.T, np.eye(2), atol=1e-10)
        assert "random initial directions" in caplog.text
        again = initialize(data, cfg, 2, use_shift=False)
        assert np.array_equal(again.model.views[0].A, init.model.views[0].A)

    def test_rank_bounds(self):
        """Should reject R > min(p, d)"""
        data = random_dataset()
        with pytest.raises(ShapeMismatchError):
            initialize(data, ShapeConfig.from_dims((8, 8), (2, 2)), 5)


class TestFit:
    """Test the alternating fit"""

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_trace_non_increasing(self, seed):
        """Should never increase the objective between block updates"""
        data = random_dataset(n=60, dims=(16, 16), q=1, seed=seed)
        cfg = ShapeConfig.from_dims((16, 16), (4, 4))
        _, report = fit(data, cfg, rank=2, penalties=PenaltyConfig(0.01, 0.01, 0.0, 0.2),
                        solver=SolverConfig(max_outer=5, inner_max_iter=200))
        trace = np.array(report.objective_trace)
        assert report.block_labels[0] == 'init'
        assert len(trace) == len(report.block_labels)
        assert np.all(np.diff(trace) <= 1e-12 * np.maximum(1.0, np.abs(trace[:-1])))

    def test_block_labels_follow_update_order(self):
        """Should update B then A per view, then gamma"""
        data = random_dataset()
        _, report = fit(data, ShapeConfig.from_dims((8, 8), (2, 2)),
                        solver=SolverConfig(max_outer=1))
        assert report.block_labels == [
            'init', 't=0 view=0 B', 't=0 view=0 A', 't=0 view=1 B', 't=0 view=1 A', 't=0 gamma',
        ]

    def test_single_class_rejected(self):
        """Should refuse single-class training data"""
        data = Dataset(np.zeros((6, 4, 4)), np.ones(6, dtype=int))
        with pytest.raises(SingleClassError):
            fit(data, ShapeConfig.from_dims((4, 4), (2, 2)))

    def test_too_few_samples(self):
        """Should refuse n < 2"""
        with pytest.raises(ValueError):
            fit(Dataset(np.zeros((1, 4, 4)), [1]), ShapeConfig.from_dims((4, 4), (2, 2)))

    def test_dims_mismatch(self):
        """Should refuse data whose dims differ from the config"""
        with pytest.raises(ShapeMismatchError):
            fit(random_dataset(), ShapeConfig.from_dims((4, 4), (2, 2)))

    def test_deterministic(self):
        """Should produce byte-identical models for the same inputs"""
        data = random_dataset(seed=3)
        cfg = ShapeConfig.from_dims((8, 8), (2, 2))
        solver = SolverConfig(max_outer=3, seed=7)
        first, _ = fit(data, cfg, solver=solver)
        second, _ = fit(data, cfg, solver=solver)
        assert model_to_bytes(first) == model_to_bytes(second)

    def test_large_lambda_a_zeroes_factors(self):
        """Should drive every A entry to zero under a huge L1 penalty"""
        data = random_dataset()
        model, report = fit(data, ShapeConfig.from_dims((8, 8), (2, 2)),
                            penalties=PenaltyConfig(lambda_a=100.0),
                            solver=SolverConfig(max_outer=3))
        assert report.nonzero_a == [[0], [0]]
        assert not model.effective_coefficients().data.any()

    def test_covariate_signal_learned(self):
        """Should put positive weight on a predictive covariate"""
        rng = np.random.default_rng(4)
        n = 200
        z = rng.standard_normal((n, 2))
        y = (z[:, 0] + 0.3 * rng.standard_normal(n) > 0).astype(int)
        data = Dataset(rng.standard_normal((n, 4, 4)), y, z)
        model, report = fit(data, ShapeConfig.from_dims((4, 4), (2, 2)),
                            penalties=PenaltyConfig(0.05, 0.05, 0.0, 0.2),
                            solver=SolverConfig(max_outer=10))
        assert model.gamma[0] > 1.0
        assert abs(model.gamma[1]) < model.gamma[0]
        assert report.train_accuracy > 0.8

    def test_learns_disk_signal(self):
        """Should separate disk images from noise on held-out data"""
        template = make_template('disks', (32, 32))
        train, test = generate(SimConfig(template, n=200, sigma=1.0, seed=1))
        model, report = fit(train, ShapeConfig.from_dims((32, 32), (4, 4)),
                            penalties=PenaltyConfig(0.001, 0.001, 0.0, 0.2),
                            solver=SolverConfig(max_outer=10))
        assert report.train_accuracy >= 0.95
        assert auc(model.predict_proba_batch(test), test.y) >= 0.95

    def test_report_json_round_trip(self):
        """Should restore an equal report from JSON"""
        _, report = fit(random_dataset(), ShapeConfig.from_dims((8, 8), (2, 2)),
                        solver=SolverConfig(max_outer=2))
        assert FitReport.from_json(report.to_json()) == report


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
