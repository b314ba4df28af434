import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sopabn.estimators import precedence_set, shapley_effects_exact
from sopabn.linear import analytic_variance, value_table
from sopabn.oracle import exact_shapley_owen, exact_via_permutations, mse
from sopabn.pabn import flatten_index, unflatten_index
from sopabn.sampling import lehmer_permutation

from conftest import random_problem

seeds = st.integers(min_value=0, max_value=2 ** 32)


@given(st.integers(1, 6), st.integers(1, 5), st.data())
def test_flat_index_bijection(horizon, d_s, data):
    # 1-based (t, n) maps onto 0-based flat positions without gaps
    t = data.draw(st.integers(1, horizon))
    n = data.draw(st.integers(1, d_s))
    k = flatten_index(t, n, d_s)
    assert 0 <= k < horizon * d_s
    assert unflatten_index(k, d_s) == (t, n)


@given(st.integers(2, 8), st.data())
def test_lehmer_gives_permutation(n, data):
    u = data.draw(st.lists(st.floats(0, 1, exclude_max=True), min_size=n - 1, max_size=n - 1))
    perm = lehmer_permutation(u, n)
    assert sorted(perm) == list(range(n))


@given(st.permutations(range(6)), st.data())
def test_precedence_excludes_pair(perm, data):
    i, j = data.draw(st.lists(st.integers(0, 5), min_size=2, max_size=2, unique=True))
    mask = precedence_set(tuple(perm), i, j)
    assert not mask >> i & 1 and not mask >> j & 1
    before = set(perm[:perm.index(i)]) - {j}
    assert {k for k in range(6) if mask >> k & 1} == before


@settings(max_examples=25, deadline=None)
@given(seeds, st.sampled_from([(1, 1, 2), (2, 1, 2), (1, 1, 3)]))
def test_dual_forms_agree(seed, shape):
    model, params, _ = random_problem(seed, *shape)
    g = value_table(model.decompose(params), params.law)
    n = model.n_inputs
    a, b = exact_shapley_owen(g, n), exact_via_permutations(g, n)
    assert max(abs(a[p] - b[p]) for p in a) < 1e-10 * max(1.0, abs(g[-1]))


@settings(max_examples=25, deadline=None)
@given(seeds, st.booleans())
def test_efficiency(seed, diagonal):
    model, params, _ = random_problem(seed, 2, 1, 3, diagonal=diagonal)
    dec = model.decompose(params)
    total = analytic_variance(dec, params.cov)
    assert abs(math.fsum(shapley_effects_exact(value_table(dec, params.law), 6)) - total) <= 1e-9 * max(1, total)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_value_function_monotone(seed):
    model, params, _ = random_problem(seed, 2, 1, 2)
    g = value_table(model.decompose(params), params.law)
    tol = 1e-10 * max(1.0, g[-1])
    for mask in range(16):
        for k in range(4):
            assert g[mask | 1 << k] >= g[mask] - tol


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.data())
def test_mse_nonnegative(values, data):
    other = data.draw(st.lists(st.floats(-1e6, 1e6), min_size=len(values), max_size=len(values)))
    out = mse(np.array(values), np.array(other))
    assert out >= 0
    assert mse(np.array(values), np.array(values)) == 0
