import numpy as np
import pytest

from sopabn.exceptions import DimensionMismatch, SingularSubmatrix
from sopabn.linear import LinearModelParams, LinearPabn, LinearPolicyReward, analytic_variance
from sopabn.pabn import (OutputSelector, ResidualLaw, condition_residuals, flatten_index, full_mask,
                         mask_from, robust_cholesky, sample_output_given_subset, sample_trajectory,
                         unflatten_index)
from sopabn.sampling import stream

from conftest import random_problem


def _dense_conditional(cov, given, values):
    # independent reference: explicit inverse on the dense blocks
    free = [i for i in range(cov.shape[0]) if i not in given]
    s_uu = cov[np.ix_(given, given)]
    s_fu = cov[np.ix_(free, given)]
    inv = np.linalg.inv(s_uu)
    return s_fu @ inv @ values, cov[np.ix_(free, free)] - s_fu @ inv @ s_fu.T


class TestIndexing:
    def test_bijection(self):
        for d_s in (1, 2, 3):
            seen = []
            for t in range(1, 5):
                for n in range(1, d_s + 1):
                    flat = flatten_index(t, n, d_s)
                    assert unflatten_index(flat, d_s) == (t, n)
                    seen.append(flat)
            assert seen == sorted(seen) == list(range(4 * d_s))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            flatten_index(0, 1, 3)
        with pytest.raises(IndexError):
            flatten_index(1, 4, 3)


class TestConditioning:
    def test_two_dim_example(self):
        cg = condition_residuals(ResidualLaw([[1, 0.5], [0.5, 1]]), {0}, [1.0])
        np.testing.assert_allclose(cg.mean, [0.5])
        np.testing.assert_allclose(cg.cov, [[0.75]])

    def test_diagonal_independence(self):
        law = ResidualLaw(np.diag([1.0, 2.0, 3.0, 4.0]))
        cg = condition_residuals(law, [1, 3], [5.0, -7.0])
        assert cg.free == (0, 2)
        np.testing.assert_array_equal(cg.mean, [0.0, 0.0])
        np.testing.assert_allclose(cg.cov, np.diag([1.0, 3.0]))

    def test_three_dim_example(self):
        cov = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], dtype=float)
        cg = condition_residuals(ResidualLaw(cov), {0, 1}, [1.0, 1.0])
        mean, ccov = _dense_conditional(cov, [0, 1], np.array([1.0, 1.0]))
        np.testing.assert_allclose(mean, [2 / 3], rtol=1e-12)
        np.testing.assert_allclose(ccov, [[4 / 3]], rtol=1e-12)
        np.testing.assert_allclose(cg.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(cg.cov, ccov, rtol=1e-12)

    def test_random_against_dense(self, rng):
        a = rng.normal(size=(5, 5))
        cov = a @ a.T + 0.1 * np.eye(5)
        law = ResidualLaw(cov)
        for given in ([0], [1, 3], [0, 2, 4], [0, 1, 2, 3]):
            values = rng.normal(size=len(given))
            cg = condition_residuals(law, given, values)
            mean, ccov = _dense_conditional(cov, given, values)
            np.testing.assert_allclose(cg.mean, mean, atol=1e-10)
            np.testing.assert_allclose(cg.cov, ccov, atol=1e-10)

    def test_empty_complement(self):
        cg = condition_residuals(ResidualLaw(np.eye(2)), {0, 1}, [1.0, 2.0])
        assert cg.free == () and cg.mean.shape == (0,) and cg.cov.shape == (0, 0)

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            condition_residuals(ResidualLaw(np.eye(2)), set(), [])

    def test_value_count_checked(self):
        with pytest.raises(DimensionMismatch):
            condition_residuals(ResidualLaw(np.eye(3)), {0, 1}, [1.0])

    def test_total_covariance(self):
        # E[Cov(e_F | e_U)] + Cov(E[e_F | e_U]) recovers the marginal block
        rng = stream(1, "total-cov")
        a = rng.normal(size=(4, 4))
        cov = a @ a.T / 4 + 0.2 * np.eye(4)
        law = ResidualLaw(cov)
        f = law.factor(mask_from([0, 2]))
        x_u = rng.standard_normal((100_000, 2)) @ f.given_chol.T
        means = x_u @ f.coef.T
        recovered = f.free_cov + np.cov(means.T)
        target = cov[np.ix_(f.free, f.free)]
        assert np.linalg.norm(recovered - target) / np.linalg.norm(target) < 0.02


class TestJitter:
    def test_semidefinite_repaired(self):
        chol = robust_cholesky(np.ones((3, 3)))
        np.testing.assert_allclose(chol @ chol.T, np.ones((3, 3)), atol=1e-6)

    def test_indefinite_raises(self):
        with pytest.raises(SingularSubmatrix):
            robust_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            ResidualLaw([[1.0, 0.2], [0.0, 1.0]])


def _zero_model(horizon=3, d_s=2):
    params = LinearModelParams(
        mu_s=np.arange(1, horizon * d_s + 1, dtype=float).reshape(horizon, d_s),
        mu_a=np.zeros((horizon - 1, 1)), beta_s=np.zeros((horizon - 1, d_s, d_s)),
        beta_a=np.zeros((horizon - 1, 1, d_s)), cov=np.eye(horizon * d_s))
    c = np.zeros((horizon, d_s))
    c[:, 0] = 1.0
    policy = LinearPolicyReward(theta=np.zeros((horizon - 1, d_s, 1)), m=np.zeros(horizon),
                                b=np.zeros((horizon - 1, 1)), c=c)
    return params, policy


class TestTrajectory:
    def test_noise_free_reward(self):
        params, policy = _zero_model()
        y = sample_trajectory(LinearPabn(policy), params, np.zeros(6))
        assert y == pytest.approx(params.mu_s[:, 0].sum())

    @pytest.mark.parametrize("n", [1, 2])
    def test_initial_state_selector(self, n, rng):
        params, policy = _zero_model()
        model = LinearPabn(policy, OutputSelector.state(1, n), affine=False)
        e = rng.normal(size=6)
        assert sample_trajectory(model, params, e) == pytest.approx(params.mu_s[0, n - 1] + e[n - 1])

    def test_trajectory_shapes(self, rng):
        model, params, _ = random_problem(3, n_states=2, horizon=3)
        traj = model.trajectory(params, rng.normal(size=6))
        assert traj.states.shape == (3, 2) and traj.actions.shape == (2, 1) and traj.rewards.shape == (3,)
        assert traj.cumulative_reward == pytest.approx(traj.rewards.sum())

    def test_deterministic(self, rng):
        model, params, _ = random_problem(4)
        e = rng.normal(size=4)
        assert sample_trajectory(model, params, e) == sample_trajectory(model, params, e)

    def test_wrong_length(self):
        model, params, _ = random_problem(4)
        with pytest.raises(DimensionMismatch):
            sample_trajectory(model, params, np.zeros(3))

    def test_bad_selector(self):
        _, policy = _zero_model()
        with pytest.raises(IndexError):
            LinearPabn(policy, OutputSelector.state(4, 1))
        with pytest.raises(ValueError):
            OutputSelector("state")


class TestConditionalOutput:
    def test_full_subset_is_deterministic(self, d4):
        model, params, _ = d4
        x = np.array([0.3, -0.2, 1.1, 0.5])
        rng = stream(0, "full")
        ys = {sample_output_given_subset(model, params, full_mask(4), x, rng) for _ in range(5)}
        assert len(ys) == 1

    def test_empty_subset_matches_variance(self, d4):
        model, params, _ = d4
        rng = stream(0, "empty")
        ys = np.array([sample_output_given_subset(model, params, 0, None, rng) for _ in range(20_000)])
        var = analytic_variance(model.decompose(params), params.cov)
        # standard error of a Gaussian sample variance
        se = var * np.sqrt(2 / (ys.size - 1))
        assert abs(ys.var(ddof=1) - var) < 3 * se

    def test_diagonal_complement_unchanged(self):
        law = ResidualLaw(np.diag([1.0, 4.0, 9.0]))
        f = law.factor(mask_from([1]))
        np.testing.assert_array_equal(f.coef, 0.0)
        np.testing.assert_allclose(f.free_cov, np.diag([1.0, 9.0]))
