import numpy as np
import pytest

from sopabn.exceptions import DimensionMismatch
from sopabn.linear import (LinearModelParams, LinearPabn, LinearPolicyReward, analytic_value_function,
                           analytic_variance, decompose, value_table)
from sopabn.pabn import ResidualLaw, full_mask
from sopabn.sampling import stream

from conftest import random_problem


def _scalar_instance():
    params = LinearModelParams(mu_s=[[0.0], [0.0]], mu_a=[[0.0]], beta_s=[[[0.5]]], beta_a=[[[1.0]]],
                               cov=np.eye(2))
    policy = LinearPolicyReward(theta=[[[0.2]]], m=[0.0, 0.0], b=[[1.0]], c=[[1.0], [1.0]])
    return params, policy


class TestDecompose:
    def test_scalar_example(self):
        dec = decompose(*_scalar_instance())
        assert dec.alpha[0, 0] == pytest.approx(1.2)
        assert dec.alpha[1, 0] == pytest.approx(1.0)
        assert dec.chain[(1, 1)][0, 0] == pytest.approx(0.7)
        np.testing.assert_allclose(dec.R, [1.9, 1.0])

    def test_identity_chain(self):
        model, params, _ = random_problem(2, n_states=3, horizon=3)
        dec = model.decompose(params)
        for t0 in (1, 2, 3):
            np.testing.assert_array_equal(dec.chain[(t0, t0 - 1)], np.eye(3))

    def test_zero_coupling(self, rng):
        H, d_s, d_a = 3, 2, 1
        params = LinearModelParams(mu_s=rng.normal(size=(H, d_s)), mu_a=rng.normal(size=(H - 1, d_a)),
                                   beta_s=np.zeros((H - 1, d_s, d_s)), beta_a=np.zeros((H - 1, d_a, d_s)),
                                   cov=np.eye(H * d_s))
        policy = LinearPolicyReward(theta=np.zeros((H - 1, d_s, d_a)), m=rng.normal(size=H),
                                    b=rng.normal(size=(H - 1, d_a)), c=rng.normal(size=(H, d_s)))
        dec = decompose(params, policy)
        for t0 in range(1, H + 1):
            for t in range(t0, H):
                np.testing.assert_array_equal(dec.chain[(t0, t)], 0.0)
        np.testing.assert_allclose(dec.R, policy.c.reshape(-1))
        gamma = policy.m.sum() + np.sum(policy.b * params.mu_a) + np.sum(policy.c * params.mu_s)
        assert dec.gamma == pytest.approx(gamma)

    @pytest.mark.parametrize("seed,shape", [(0, (2, 1, 2)), (1, (3, 1, 2)), (2, (2, 2, 3)), (3, (1, 1, 4))])
    def test_matches_rollout(self, seed, shape):
        model, params, _ = random_problem(seed, *shape, affine=False)
        dec = model.decompose(params)
        e = stream(seed, "e").normal(size=(50, model.n_inputs))
        y = model.simulate(params, e)
        np.testing.assert_allclose(y - dec.gamma, e @ dec.R, atol=1e-10)

    def test_affine_path_matches_rollout(self):
        model, params, _ = random_problem(5, 3, 1, 2)
        slow = LinearPabn(model.policy, affine=False)
        e = stream(5, "e").normal(size=(20, 6))
        np.testing.assert_allclose(model.simulate(params, e), slow.simulate(params, e), atol=1e-12)

    def test_gamma_is_noise_free_reward(self):
        model, params, _ = random_problem(6, 3, 1, 2)
        assert model.decompose(params).gamma == pytest.approx(model.simulate(params, np.zeros((1, 6)))[0])

    def test_dimension_mismatch(self):
        params, _ = _scalar_instance()
        policy = LinearPolicyReward(theta=np.zeros((1, 2, 1)), m=[0, 0], b=[[1.0]], c=np.ones((2, 2)))
        with pytest.raises(DimensionMismatch):
            decompose(params, policy)


class TestVariance:
    def test_examples(self):
        dec = decompose(*_scalar_instance())
        dec = type(dec)(0.0, dec.alpha, dec.chain, np.array([1.0, 1.0]))
        assert analytic_variance(dec, np.eye(2)) == 2.0
        dec = type(dec)(0.0, dec.alpha, dec.chain, np.array([1.0, -1.0]))
        assert analytic_variance(dec, np.ones((2, 2))) == 0.0

    @pytest.mark.slow
    def test_monte_carlo(self):
        model, params, _ = random_problem(7, 3, 1, 2)
        var = analytic_variance(model.decompose(params), params.cov)
        y = model.simulate(params, params.law.sample(stream(7, "mc"), 1_000_000))
        se = var * np.sqrt(2 / (y.size - 1))
        assert abs(y.var(ddof=1) - var) < 3 * se


def _dec(R):
    dec = decompose(*_scalar_instance())
    return type(dec)(0.0, dec.alpha, dec.chain, np.asarray(R, dtype=float))


class TestValueFunction:
    def test_diagonal(self, rng):
        var = rng.uniform(0.5, 2, 4)
        R = rng.normal(size=4)
        law = ResidualLaw(np.diag(var))
        for mask in range(16):
            idx = [i for i in range(4) if mask >> i & 1]
            assert analytic_value_function(_dec(R), law, mask) == pytest.approx(np.sum(R[idx] ** 2 * var[idx]))

    @pytest.mark.parametrize("rho", [-0.5, 0.0, 0.3, 0.5, 0.9])
    def test_correlated_pair(self, rho):
        law = ResidualLaw([[1, rho], [rho, 1]])
        assert analytic_value_function(_dec([1, 1]), law, 1) == pytest.approx((1 + rho) ** 2)

    def test_correlated_pair_monte_carlo(self):
        # Var[E[Y | e_1]] estimated by binning e_1 finely
        rho = 0.5
        e = ResidualLaw([[1, rho], [rho, 1]]).sample(stream(0, "pair"), 400_000)
        y = e.sum(axis=1)
        order = np.argsort(e[:, 0])
        cond_means = y[order].reshape(2000, 200).mean(axis=1)
        assert cond_means.var() == pytest.approx((1 + rho) ** 2, rel=0.03)

    @pytest.mark.parametrize("seed", range(5))
    def test_endpoints_and_monotone(self, seed):
        model, params, _ = random_problem(seed, 3, 1, 2)
        dec = model.decompose(params)
        total = analytic_variance(dec, params.cov)
        table = value_table(dec, params.law)
        assert table[0] == 0.0
        assert table[full_mask(6)] == pytest.approx(total, rel=1e-12)
        assert np.all(table <= total * (1 + 1e-10))
        # g is monotone in U
        for mask in range(64):
            for i in range(6):
                assert table[mask | 1 << i] >= table[mask] - 1e-10 * total

    def test_table_matches_pointwise(self):
        model, params, _ = random_problem(8, 2, 1, 2)
        dec = model.decompose(params)
        table = value_table(dec, params.law)
        for mask in range(16):
            assert analytic_value_function(dec, params.law, mask) == pytest.approx(table[mask], abs=1e-12)

    def test_diagonal_additive(self):
        model, params, _ = random_problem(9, 3, 1, 2, diagonal=True)
        table = value_table(model.decompose(params), params.law)
        singles = [table[1 << i] for i in range(6)]
        for mask in range(64):
            assert table[mask] == pytest.approx(sum(s for i, s in enumerate(singles) if mask >> i & 1), abs=1e-12)
